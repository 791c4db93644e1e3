"""One function per subcommand. Every artifact lands under ``--out`` with a fixed name."""

import csv
import hashlib
import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.core.config import REFERENCE_PARAM_COUNT, ModelConfig, RunConfig
from src.core.datasets import ScanLoader, load_manifest, make_benchmark, write_manifest
from src.core.exceptions import DataError, SelfTestFailure, TrainingError
from src.core.formats import (
    read_checkpoint,
    read_overlap_table,
    read_range_image,
    write_overlap_table,
    write_range_image,
)
from src.core.model import SeqOT, gem_pool, param_count
from src.core.models import OverlapTable, ProgressUpdate, RangeImage, TrainingResult
from src.core.nn import Tensor, no_grad
from src.core.overlap import PairLabeller
from src.core.retrieval import (
    DescriptorIndex,
    average_recall_at_n,
    build_index,
    evaluate,
    sequence_length_sweep,
    yaw_sweep,
)
from src.core.training import (
    Phase1Trainer,
    Phase2Trainer,
    SubDescriptorCache,
    compute_sub_descriptors,
    describe_passes,
    load_model_checkpoint,
    window_anchors,
)

logger = logging.getLogger(__name__)

RANGE_IMAGE_DIR = 'range_images'
DATASET_DIR = 'dataset'
OVERLAP_FILE = 'overlap.sqot'
PHASE1_FILE = 'phase1.sqwt'
PHASE2_FILE = 'phase2.sqwt'
SUBDESC_FILE = 'subdescriptors.sqix'
DESCRIPTORS_FILE = 'descriptors.sqix'
INDEX_FILE = 'index.sqix'
QUERY_FILE = 'query_results.json'
REPORT_FILE = 'eval_report.json'
PR_FILE = 'pr_curve.csv'
BENCH_FILE = 'bench.json'
SELFTEST_FILE = 'selftest.json'


@dataclass
class Context:
    """State shared by the steps of one command."""
    command: str
    cfg: RunConfig
    out: Path
    workers: int = 1
    args: object = None
    inputs: List[Path] = field(default_factory=list)
    outputs: List[Path] = field(default_factory=list)
    cancel_event: threading.Event = field(default_factory=threading.Event)
    _loader: Optional[ScanLoader] = None

    def path(self, name: str) -> Path:
        return self.out / name

    def produced(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def require(self, name: str, hint: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise DataError(f"{path} not found; run `seqplace {hint}` first")
        self.inputs.append(path)
        return path


def file_hash(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def log_progress(update: ProgressUpdate):
    if update.total:
        logger.info("%s [%d/%d] %s", update.phase, update.current, update.total, update.message)
    else:
        logger.info("%s: %s", update.phase, update.message)


def run_cancellable(ctx: Context, work: Callable[[], TrainingResult]) -> TrainingResult:
    """Run ``work`` on a worker thread; Ctrl-C sets the cancel event and waits for a clean stop."""
    outcome: Dict[str, object] = {}

    def target():
        try:
            outcome['result'] = work()
        except BaseException as e:  # re-raised on the main thread
            outcome['error'] = e

    thread = threading.Thread(target=target, daemon=True)
    thread.start()
    try:
        while thread.is_alive():
            thread.join(timeout=0.2)
    except KeyboardInterrupt:
        logger.warning("interrupted, stopping after the current step")
        ctx.cancel_event.set()
        thread.join()
    if 'error' in outcome:
        raise outcome['error']
    return outcome['result']


# ----------------------------------------------------------------------------
# Shared loading
# ----------------------------------------------------------------------------

def dataset(ctx: Context) -> ScanLoader:
    if ctx._loader is not None:
        return ctx._loader
    data = ctx.cfg.data
    if data.manifest:
        manifest_path = Path(data.manifest)
        manifest = load_manifest(manifest_path)
        ctx.inputs.append(manifest_path)
        ctx.inputs.extend(s.cloud_path for s in manifest.scans if s.cloud_path is not None)
    else:
        manifest = make_benchmark(data.synthetic_seed, scans=data.scans, sensor=ctx.cfg.sensor,
                                  extent=data.extent, obstacle_count=data.obstacle_count,
                                  noise_sigma=data.noise_sigma)
        manifest_dir = ctx.path(DATASET_DIR)
        if not (manifest_dir / 'manifest.json').exists():
            ctx.produced(write_manifest(manifest_dir, manifest))
    ctx._loader = ScanLoader(manifest, sensor=ctx.cfg.sensor)
    return ctx._loader


class ImageStore:
    """Range images from ``range_images/`` when projected earlier, else projected on demand."""

    def __init__(self, ctx: Context, loader: ScanLoader):
        self.loader = loader
        self.directory = ctx.path(RANGE_IMAGE_DIR)
        self._cache: Dict[int, RangeImage] = {}

    def __getitem__(self, scan_id: int) -> RangeImage:
        scan_id = int(scan_id)
        if scan_id not in self._cache:
            path = self.directory / f"{scan_id:06d}.sqri"
            self._cache[scan_id] = read_range_image(path) if path.exists() else self.loader.image(scan_id)
        return self._cache[scan_id]


class RotatedImages:
    """Range images of scans seen by a sensor turned by a fixed yaw."""

    def __init__(self, loader: ScanLoader, yaw: float):
        self.loader = loader
        self.yaw = yaw

    def __getitem__(self, scan_id: int) -> RangeImage:
        return self.loader.rotated_image(scan_id, self.yaw)


def load_table(ctx: Context) -> OverlapTable:
    path = ctx.require(OVERLAP_FILE, "label")
    return read_overlap_table(path, np.array(dataset(ctx).ids(), dtype=np.int64))


def build_model(ctx: Context) -> SeqOT:
    return SeqOT(ctx.cfg.model, ctx.cfg.sensor, seed=ctx.cfg.train.seed)


def trained_model(ctx: Context, weights: Optional[Path] = None) -> Tuple[SeqOT, Path]:
    model = build_model(ctx)
    if weights is None:
        weights = ctx.path(PHASE2_FILE) if ctx.path(PHASE2_FILE).exists() else ctx.path(PHASE1_FILE)
    if not Path(weights).exists():
        raise TrainingError(f"no trained weights at {weights}; run `seqplace train --phase 1` first")
    load_model_checkpoint(model, weights)
    ctx.inputs.append(Path(weights))
    return model, Path(weights)


def split_passes(loader: ScanLoader, split: str) -> List[List[int]]:
    return [run for run in loader.pass_ids() if loader.entry(run[0]).split == split]


def strided_queries(ctx: Context, loader: ScanLoader, descriptors: DescriptorIndex) -> List[Tuple[int, np.ndarray]]:
    query_ids = set(loader.ids('query'))
    rows = [(int(i), d) for i, d in zip(descriptors.ids, descriptors.descriptors) if int(i) in query_ids]
    return rows[::ctx.cfg.eval.query_stride]


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def cmd_project(ctx: Context):
    loader = dataset(ctx)
    directory = ctx.path(RANGE_IMAGE_DIR)
    ids = loader.ids()
    for k, scan_id in enumerate(ids):
        path = directory / f"{scan_id:06d}.sqri"
        write_range_image(path, loader.image(scan_id))
        ctx.produced(path)
        if (k + 1) % 100 == 0 or k + 1 == len(ids):
            log_progress(ProgressUpdate("Projecting", k + 1, len(ids), f"scan {scan_id}"))


def cmd_label(ctx: Context):
    loader = dataset(ctx)
    ids = loader.ids()
    overlap_cfg = ctx.cfg.overlap
    labeller = PairLabeller(
        [loader.cloud(i) for i in ids],
        [loader.entry(i).pose for i in ids],
        ctx.cfg.sensor,
        delta=overlap_cfg.delta,
        pos_threshold=overlap_cfg.threshold,
        gate_radius=overlap_cfg.gate_radius,
        scan_ids=ids,
        workers=ctx.workers,
        progress_callback=log_progress,
        cancel_event=ctx.cancel_event,
    )
    table = labeller.build()
    write_overlap_table(ctx.produced(ctx.path(OVERLAP_FILE)), table)
    mask = table.positive_mask()
    positives = int(mask.sum()) - int(np.trace(mask))
    logger.info("overlap table: %d scans, %d positive pairs", len(table), positives)


def _write_metrics(ctx: Context, result: TrainingResult, name: str, extra: dict):
    metrics = {
        'phase': result.phase,
        'success': result.success,
        'epochs_run': result.epochs_run,
        'steps_run': result.steps_run,
        'epoch_losses': result.epoch_losses,
        'learning_rates': result.learning_rates,
        **extra,
    }
    ctx.produced(ctx.path(f"metrics_{name}.json")).write_text(json.dumps(metrics, indent=2), encoding='utf-8')
    with open(ctx.produced(ctx.path(f"loss_{name}.csv")), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['epoch', 'loss', 'lr'])
        for epoch, (loss, lr) in enumerate(zip(result.epoch_losses, result.learning_rates), start=1):
            writer.writerow([epoch, repr(loss), repr(lr)])


def _subdescriptor_cache(ctx: Context, model: SeqOT, loader: ScanLoader) -> SubDescriptorCache:
    path = ctx.path(SUBDESC_FILE)
    if path.exists():
        ctx.inputs.append(path)
        return SubDescriptorCache.load(path)
    images = ImageStore(ctx, loader)
    windows = window_anchors(loader.ids(), loader.pass_ids())
    cache = compute_sub_descriptors(model, images, windows, progress_callback=log_progress)
    cache.save(ctx.produced(path))
    return cache


def cmd_train(ctx: Context):
    args = ctx.args
    cfg = ctx.cfg.train
    loader = dataset(ctx)
    table = load_table(ctx)
    model = build_model(ctx)
    database_anchors = window_anchors(loader.ids(), split_passes(loader, 'database'))

    if args.phase == 1:
        checkpoint = ctx.path(PHASE1_FILE)
        trainer = Phase1Trainer(model, ImageStore(ctx, loader), table, cfg, database_anchors,
                                progress_callback=log_progress, cancel_event=ctx.cancel_event)
        epochs = cfg.epochs if args.epochs is None else args.epochs
        extra = {'margin': cfg.margin, 'n_pos': cfg.n_pos, 'n_neg': cfg.n_neg, 'lr': cfg.lr_phase1}
    else:
        load_model_checkpoint(model, ctx.require(PHASE1_FILE, "train --phase 1"))
        # a cache older than the phase-1 weights was made from other weights
        stale = ctx.path(SUBDESC_FILE)
        if stale.exists() and stale.stat().st_mtime < ctx.path(PHASE1_FILE).stat().st_mtime:
            stale.unlink()
        cache = _subdescriptor_cache(ctx, model, loader)
        checkpoint = ctx.path(PHASE2_FILE)
        trainer = Phase2Trainer(model, cache, table, cfg, database_anchors,
                                progress_callback=log_progress, cancel_event=ctx.cancel_event)
        epochs = cfg.epochs_phase2 if args.epochs is None else args.epochs
        extra = {'margin': cfg.margin, 'n_pos': cfg.n_pos, 'n_neg': cfg.n_neg, 'lr': cfg.lr_phase2}

    if args.resume and checkpoint.exists():
        ctx.inputs.append(checkpoint)
        trainer.resume(read_checkpoint(checkpoint))
        logger.info("resuming phase %d at epoch %d", args.phase, trainer.epoch)

    result = run_cancellable(ctx, lambda: trainer.run(epochs))
    trainer.save_checkpoint(ctx.produced(checkpoint))
    if args.phase == 2:
        extra['gem_p'] = model.gem.p_value
    _write_metrics(ctx, result, f"phase{args.phase}", extra)
    if not result.success:
        raise TrainingError(result.error_message or f"phase {args.phase} did not finish")


def cmd_describe(ctx: Context):
    args = ctx.args
    loader = dataset(ctx)
    model, weights = trained_model(ctx, args.weights)
    started = time.perf_counter()
    pairs = describe_passes(model, ImageStore(ctx, loader), loader.pass_ids(), stream=args.stream,
                            progress_callback=log_progress)
    elapsed = time.perf_counter() - started
    if not pairs:
        raise DataError(f"no pass holds a full sequence of {model.seq_len} scans")
    index = build_index(pairs, metadata={'weights': str(weights), 'mode': 'stream' if args.stream else 'batch',
                                         'config_hash': ctx.cfg.config_hash()})
    index.save(ctx.produced(ctx.path(DESCRIPTORS_FILE)))
    logger.info("described %d sequences in %.1f s (%s)", len(pairs), elapsed,
                'stream' if args.stream else 'batch')


def cmd_index(ctx: Context):
    loader = dataset(ctx)
    descriptors = DescriptorIndex.load(ctx.require(DESCRIPTORS_FILE, "describe"))
    database_ids = set(loader.ids('database'))
    pairs = [(int(i), d) for i, d in zip(descriptors.ids, descriptors.descriptors) if int(i) in database_ids]
    metadata = dict(descriptors.metadata)
    metadata['descriptors_hash'] = file_hash(ctx.path(DESCRIPTORS_FILE))
    build_index(pairs, metadata).save(ctx.produced(ctx.path(INDEX_FILE)))


def cmd_query(ctx: Context):
    args = ctx.args
    loader = dataset(ctx)
    index = DescriptorIndex.load(ctx.require(INDEX_FILE, "index"))
    descriptors = DescriptorIndex.load(ctx.require(DESCRIPTORS_FILE, "describe"))
    if args.scan:
        queries = [(s, descriptors.row_of(s)) for s in args.scan]
    else:
        queries = strided_queries(ctx, loader, descriptors)
    results = {str(q): [[ref, dist] for ref, dist in index.query_top_k(d, args.top_k)] for q, d in queries}
    path = ctx.produced(ctx.path(QUERY_FILE))
    path.write_text(json.dumps(results, indent=2), encoding='utf-8')
    logger.info("answered %d queries with top-%d lists", len(results), args.top_k)


def _segment_queries(loader: ScanLoader, queries, seq_len: int, reversed_segment: bool):
    """Queries whose whole sequence lies inside (or entirely outside) the reversed segment."""
    selected = []
    for query_id, descriptor in queries:
        flags = [loader.entry(s).reversed_segment for s in range(query_id - seq_len + 1, query_id + 1)]
        if all(flags) if reversed_segment else not any(flags):
            selected.append((query_id, descriptor))
    return selected


def cmd_eval(ctx: Context):
    args = ctx.args
    eval_cfg = ctx.cfg.eval
    loader = dataset(ctx)
    table = load_table(ctx)
    index = DescriptorIndex.load(ctx.require(INDEX_FILE, "index"))
    descriptors = DescriptorIndex.load(ctx.require(DESCRIPTORS_FILE, "describe"))
    queries = strided_queries(ctx, loader, descriptors)
    report = evaluate(queries, index, table, eval_cfg.k_values, eval_cfg.pr_thresholds)
    document = report.to_dict()

    m = ctx.cfg.model.seq_len_m
    for name, flag in (('forward', False), ('reversed', True)):
        subset = _segment_queries(loader, queries, m, flag)
        recall, excluded = average_recall_at_n(subset, index, table, 1) if subset else (None, 0)
        document[f'ar1_{name}'] = recall
        document[f'{name}_queries'] = len(subset)

    if args.yaw_sweep or args.seq_sweep:
        model, _ = trained_model(ctx)
    if args.yaw_sweep:
        query_passes = split_passes(loader, 'query')
        keep = {q for q, _ in queries}

        def describe_rotated(angle: float):
            pairs = describe_passes(model, RotatedImages(loader, math.radians(angle)), query_passes)
            return [(q, d) for q, d in pairs if q in keep]

        document['yaw_sweep'] = {str(a): r for a, r in
                                 yaw_sweep(describe_rotated, index, table, eval_cfg.yaw_angles_deg).items()}
    if args.seq_sweep:
        cache = _subdescriptor_cache(ctx, model, loader)
        p = model.gem.p_value

        def pool(rows: np.ndarray) -> np.ndarray:
            with no_grad():
                return gem_pool(rows, p).data

        sweep = sequence_length_sweep(cache, loader.ids('database'), [q for q, _ in queries], table,
                                      eval_cfg.seq_lengths, pool)
        document['sequence_length_sweep'] = {str(k): v for k, v in sweep.items()}

    ctx.produced(ctx.path(REPORT_FILE)).write_text(json.dumps(document, indent=2), encoding='utf-8')
    with open(ctx.produced(ctx.path(PR_FILE)), 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['threshold', 'precision', 'recall'])
        for t, p, r in report.pr:
            writer.writerow([repr(t), repr(p), repr(r)])
    logger.info("AR@1=%s AR@5=%s AR@20=%s F1max=%.4f", report.ar1, report.ar5, report.ar20, report.f1_max)


def _timed(fn: Callable[[], object], repeats: int) -> Dict[str, float]:
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - started) * 1000.0)
    return {'median_ms': float(np.median(samples)), 'p90_ms': float(np.percentile(samples, 90))}


def cmd_bench(ctx: Context):
    args = ctx.args
    cfg = ctx.cfg
    rng = np.random.default_rng(cfg.train.seed)
    model = build_model(ctx)
    h, w = cfg.sensor.height, cfg.sensor.width
    images = [RangeImage.from_grid(rng.uniform(1.0, cfg.sensor.max_range, size=(h, w)).astype(np.float32))
              for _ in range(cfg.model.seq_len_m + 1)]
    repeats = max(1, args.repeats)

    with no_grad():
        features = [model.ssm_forward(img) for img in images[:3]]
        subs = np.stack([model.msm(*features).data for _ in range(cfg.model.seq_len_m - 2)])
        database = rng.standard_normal((args.index_size, subs.shape[1])).astype(np.float32)
        database /= np.linalg.norm(database, axis=1, keepdims=True)
        index = DescriptorIndex(np.arange(args.index_size, dtype=np.uint64), database)

        state = model.new_stream()
        for img in images[:-1]:
            state, _ = model.stream_update(state, img)

        def stream_step():
            nonlocal state
            state, descriptor = model.stream_update(state, images[-1])
            index.query_top_k(descriptor, 20)

        stages = {
            'single_scan_module': _timed(lambda: model.ssm_forward(images[0]), repeats),
            'multi_scan_module': _timed(lambda: model.msm(*features), repeats),
            'gem_pooling': _timed(lambda: model.gem(Tensor(subs, dtype=model.dtype)), repeats),
            'top20_query': _timed(lambda: index.query_top_k(database[0], 20), repeats),
            'stream_scan_plus_query': _timed(stream_step, repeats),
        }
    report = {
        'sensor': [h, w],
        'index_size': args.index_size,
        'stages': stages,
        'param_count': param_count(cfg.model, cfg.sensor),
        'param_count_full_config': param_count(ModelConfig.full()),
        'param_count_reference': REFERENCE_PARAM_COUNT,
    }
    ctx.produced(ctx.path(BENCH_FILE)).write_text(json.dumps(report, indent=2), encoding='utf-8')
    logger.info("stream scan + top-20 query: %.2f ms median", stages['stream_scan_plus_query']['median_ms'])


def cmd_selftest(ctx: Context):
    from .selftest import run_selftest
    results = run_selftest(progress_callback=log_progress)
    ctx.produced(ctx.path(SELFTEST_FILE)).write_text(json.dumps(results, indent=2), encoding='utf-8')
    failed = [r['name'] for r in results if not r['passed']]
    if failed:
        raise SelfTestFailure(f"{len(failed)} check(s) failed: {', '.join(failed)}")


COMMANDS: Dict[str, Callable[[Context], None]] = {
    'project': cmd_project,
    'label': cmd_label,
    'train': cmd_train,
    'describe': cmd_describe,
    'index': cmd_index,
    'query': cmd_query,
    'eval': cmd_eval,
    'bench': cmd_bench,
    'selftest': cmd_selftest,
}
