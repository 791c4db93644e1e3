"""End-to-end tests of the command-line pipeline on a tiny synthetic benchmark."""

import json
import os

import numpy as np
import pytest

from src.cli.app import EXIT_DATA, EXIT_OK, EXIT_USAGE, VERSION, run
from src.core.config import RunConfig
from src.core.formats import read_checkpoint, write_checkpoint, write_overlap_table
from src.core.model import SeqOT
from src.core.models import OverlapTable
from src.core.retrieval import DescriptorIndex

CONFIG = {
    'sensor': {'width': 36, 'height': 8, 'f_up': 0.3490658503988659, 'f_down': 0.17453292519943295,
               'max_range': 50.0},
    'model': {'c': 4, 'heads_sst': 2, 'heads_mst': 2, 'ffn_mult': 1, 'vlad_clusters': 4,
              'seq_len_m': 4, 'leg_channels': [2]},
    'data': {'scans': 60, 'obstacle_count': 40, 'extent': 40.0},
    'eval': {'yaw_angles_deg': [0.0, 90.0], 'seq_lengths': [4, 6], 'pr_thresholds': 10},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file and output directory with untrained phase-1 weights already in place."""
    root = tmp_path_factory.mktemp("seqplace")
    config_path = root / "run.json"
    config_path.write_text(json.dumps(CONFIG), encoding='utf-8')
    out = root / "out"
    out.mkdir()
    cfg = RunConfig.from_dict(CONFIG)
    write_checkpoint(out / "phase1.sqwt", SeqOT(cfg.model, cfg.sensor, seed=cfg.train.seed).state_dict())
    return config_path, out


def seqplace(workspace, *argv):
    config_path, out = workspace
    return run(['--config', str(config_path), '--out', str(out), *argv])


@pytest.fixture(scope="module")
def pipeline(workspace):
    """Run every stage up to evaluation once."""
    codes = {}
    for step in (['project'], ['label'], ['describe', '--stream'], ['describe'], ['index'],
                 ['query', '--top-k', '5', '--scan', '10'], ['eval', '--yaw-sweep', '--seq-sweep']):
        codes[step[0] + ('_stream' if '--stream' in step else '')] = seqplace(workspace, *step)
    return codes, workspace[1]


class TestPipeline:
    """Tests for the full project-to-eval run."""

    def test_every_step_succeeds(self, pipeline):
        codes, _ = pipeline
        assert codes == {name: EXIT_OK for name in codes}

    def test_artifacts_written(self, pipeline):
        _, out = pipeline
        for name in ('dataset/manifest.json', 'range_images/000000.sqri', 'overlap.sqot', 'descriptors.sqix',
                     'index.sqix', 'query_results.json', 'eval_report.json', 'pr_curve.csv',
                     'subdescriptors.sqix'):
            assert (out / name).exists(), name

    def test_run_manifests(self, pipeline):
        _, out = pipeline
        manifest = json.loads((out / "run_eval.json").read_text(encoding='utf-8'))
        assert manifest['version'] == VERSION
        assert manifest['command'] == 'eval'
        assert str(out / "index.sqix") in manifest['inputs']
        assert len(manifest['config_hash']) == 64

    def test_index_holds_database_scans(self, pipeline):
        """Test that the index keeps only database descriptors."""
        _, out = pipeline
        index = DescriptorIndex.load(out / "index.sqix")
        assert len(index) == 30 - 3
        assert int(index.ids.max()) < 30
        assert index.metadata['mode'] == 'batch'
        assert 'descriptors_hash' in index.metadata

    def test_query_finds_itself(self, pipeline):
        _, out = pipeline
        results = json.loads((out / "query_results.json").read_text(encoding='utf-8'))
        assert list(results) == ['10']
        assert len(results['10']) == 5
        assert results['10'][0] == [10, 0.0]

    def test_report(self, pipeline):
        _, out = pipeline
        report = json.loads((out / "eval_report.json").read_text(encoding='utf-8'))
        recalls = [report[k] for k in ('ar1', 'ar5', 'ar20') if report[k] is not None]
        assert recalls == sorted(recalls)
        assert set(report['yaw_sweep']) == {'0.0', '90.0'}
        assert set(report['sequence_length_sweep']) == {'4', '6'}
        assert report['forward_queries'] + report['reversed_queries'] <= report['evaluated_queries'] \
            + report['excluded_queries']

    def test_pr_curve_csv(self, pipeline):
        _, out = pipeline
        lines = (out / "pr_curve.csv").read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'threshold,precision,recall'
        assert len(lines) == 11


class TestStreamDescribe:
    """Tests that stream mode reproduces batch descriptors."""

    def test_stream_matches_batch(self, workspace):
        _, out = workspace
        assert seqplace(workspace, 'describe', '--stream') == EXIT_OK
        stream = DescriptorIndex.load(out / "descriptors.sqix")
        assert seqplace(workspace, 'describe') == EXIT_OK
        batch = DescriptorIndex.load(out / "descriptors.sqix")
        np.testing.assert_array_equal(stream.ids, batch.ids)
        np.testing.assert_allclose(stream.descriptors, batch.descriptors, atol=1e-5)


class TestExitCodes:
    """Tests for usage and data errors."""

    def test_version(self, capsys):
        assert run(['--version']) == EXIT_OK
        assert VERSION in capsys.readouterr().out

    def test_unknown_subcommand(self, capsys):
        assert run(['frobnicate']) == EXIT_USAGE
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({'model': {'bogus': 1}}), encoding='utf-8')
        assert run(['--config', str(path), '--out', str(tmp_path / "out"), 'project']) == EXIT_USAGE

    def test_bad_workers(self, tmp_path):
        assert run(['--workers', '0', '--out', str(tmp_path), 'selftest']) == EXIT_USAGE

    def test_train_before_label(self, tmp_path, capsys):
        """Test that a missing overlap table names the step to run first."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps(CONFIG), encoding='utf-8')
        assert run(['--config', str(path), '--out', str(tmp_path / "out"), 'train', '--phase', '1']) == EXIT_DATA
        assert "seqplace label" in capsys.readouterr().err

    def test_describe_without_weights(self, tmp_path, capsys):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(CONFIG), encoding='utf-8')
        assert run(['--config', str(path), '--out', str(tmp_path / "out"), 'describe']) == EXIT_DATA
        assert "train --phase 1" in capsys.readouterr().err


class TestSelfTest:
    """Tests for the selftest subcommand."""

    def test_all_checks_pass(self, tmp_path):
        assert run(['--out', str(tmp_path), 'selftest']) == EXIT_OK
        results = json.loads((tmp_path / "selftest.json").read_text(encoding='utf-8'))
        assert results
        assert all(r['passed'] for r in results)


TRAIN_CONFIG = {
    **CONFIG,
    'train': {'epochs': 1, 'epochs_phase2': 1, 'queries_per_epoch': 2, 'n_pos': 2, 'n_neg': 2,
              'vlad_init_windows': 8},
}


@pytest.fixture(scope="module")
def labelled(tmp_path_factory):
    """Output directory with an overlap table where scans within 2 ids overlap."""
    root = tmp_path_factory.mktemp("seqplace_train")
    config_path = root / "run.json"
    config_path.write_text(json.dumps(TRAIN_CONFIG), encoding='utf-8')
    out = root / "out"
    out.mkdir()
    ids = np.arange(TRAIN_CONFIG['data']['scans'])
    values = (np.abs(ids[:, None] - ids[None, :]) <= 2).astype(np.float32) * 0.8
    np.fill_diagonal(values, 1.0)
    write_overlap_table(out / "overlap.sqot", OverlapTable(values=values, scan_ids=ids, delta=1.0, pos_threshold=0.3))
    return config_path, out


class TestTrain:
    """Tests for both training phases through the command line."""

    def test_phase1_is_bit_reproducible(self, labelled):
        """Test that two phase-1 runs with one seed write identical checkpoints."""
        _, out = labelled
        assert seqplace(labelled, '--workers', '1', 'train', '--phase', '1') == EXIT_OK
        first = (out / "phase1.sqwt").read_bytes()
        assert seqplace(labelled, '--workers', '1', 'train', '--phase', '1') == EXIT_OK
        assert (out / "phase1.sqwt").read_bytes() == first

    def test_phase1_metrics(self, labelled):
        _, out = labelled
        assert seqplace(labelled, 'train', '--phase', '1') == EXIT_OK
        metrics = json.loads((out / "metrics_phase1.json").read_text(encoding='utf-8'))
        assert metrics['success']
        assert metrics['epochs_run'] == 1
        assert metrics['steps_run'] == 2
        lines = (out / "loss_phase1.csv").read_text(encoding='utf-8').splitlines()
        assert lines[0] == 'epoch,loss,lr'
        assert len(lines) == 2

    def test_phase1_resume(self, labelled):
        """Test that --resume continues from the saved epoch instead of restarting."""
        _, out = labelled
        assert seqplace(labelled, 'train', '--phase', '1') == EXIT_OK
        assert seqplace(labelled, 'train', '--phase', '1', '--resume', '--epochs', '2') == EXIT_OK
        metrics = json.loads((out / "metrics_phase1.json").read_text(encoding='utf-8'))
        assert metrics['epochs_run'] == 1
        assert read_checkpoint(out / "phase1.sqwt")['train.epoch'][0] == 2
        manifest = json.loads((out / "run_train.json").read_text(encoding='utf-8'))
        assert str(out / "phase1.sqwt") in manifest['inputs']

    def test_phase2_trains_gem_only(self, labelled):
        _, out = labelled
        assert seqplace(labelled, 'train', '--phase', '1') == EXIT_OK
        assert seqplace(labelled, 'train', '--phase', '2') == EXIT_OK
        phase1 = read_checkpoint(out / "phase1.sqwt")
        phase2 = read_checkpoint(out / "phase2.sqwt")
        for name, value in phase1.items():
            if name.startswith('gem.') or name.startswith('optim.') or name == 'train.epoch':
                continue
            np.testing.assert_array_equal(phase2[name], value, err_msg=name)
        metrics = json.loads((out / "metrics_phase2.json").read_text(encoding='utf-8'))
        assert metrics['gem_p'] >= 1.0
        assert (out / "subdescriptors.sqix").exists()

    def test_stale_cache_is_rebuilt(self, labelled):
        """Test that a sub-descriptor cache older than the phase-1 weights is discarded."""
        _, out = labelled
        assert seqplace(labelled, 'train', '--phase', '1') == EXIT_OK
        stale = out / "subdescriptors.sqix"
        stale.write_bytes(b"not a cache")
        os.utime(stale, (0, 0))
        assert seqplace(labelled, 'train', '--phase', '2') == EXIT_OK
        assert stale.read_bytes()[:4] != b"not "


class TestBench:
    """Tests for the bench subcommand."""

    def test_report(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(CONFIG), encoding='utf-8')
        code = run(['--config', str(path), '--out', str(tmp_path / "out"),
                    'bench', '--repeats', '2', '--index-size', '50'])
        assert code == EXIT_OK
        report = json.loads((tmp_path / "out" / "bench.json").read_text(encoding='utf-8'))
        assert set(report) == {'sensor', 'index_size', 'stages', 'param_count', 'param_count_full_config',
                               'param_count_reference'}
        assert set(report['stages']) == {'single_scan_module', 'multi_scan_module', 'gem_pooling',
                                         'top20_query', 'stream_scan_plus_query'}
        assert report['sensor'] == [8, 36]
        assert report['index_size'] == 50
        assert report['param_count_full_config'] > report['param_count']
