"""Unit tests for overlap labels and training tuple sampling."""

import threading
from unittest.mock import Mock

import numpy as np
import pytest

from src.cli.selftest import brute_force_overlap, pixel_centred_cloud, random_image
from src.core.exceptions import DataError, SamplingError, ShapeError, TrainingCancelled
from src.core.models import OverlapTable, Pose, RangeImage, SensorModel, window_for
from src.core.overlap import PairLabeller, build_pair_labels, eligible_queries, overlap, sample_training_tuple


@pytest.fixture
def rng():
    return np.random.default_rng(3)


@pytest.fixture
def sensor():
    return SensorModel(width=36, height=8, max_range=50.0)


@pytest.fixture
def band_table():
    """Twelve scans where neighbours within 2 ids overlap."""
    ids = np.arange(12)
    values = (np.abs(ids[:, None] - ids[None, :]) <= 2).astype(np.float32) * 0.8
    np.fill_diagonal(values, 1.0)
    return OverlapTable(values=values, scan_ids=ids, delta=1.0, pos_threshold=0.3)


class TestOverlap:
    """Tests for the per-pair overlap value."""

    def test_identical_images(self, rng):
        """Test that an image fully overlaps itself."""
        image = random_image(rng)
        assert overlap(image, image) == 1.0

    def test_matches_brute_force(self, rng):
        """Test agreement with a pixel-by-pixel counter."""
        for _ in range(20):
            a, b = random_image(rng, invalid=0.3), random_image(rng, invalid=0.3)
            b.grid[b.mask] = a.grid[b.mask] + rng.uniform(-2.0, 2.0, size=int(b.mask.sum())).astype(np.float32)
            b.mask &= b.grid > 0
            assert overlap(a, b, 1.0) == brute_force_overlap(a, b, 1.0)

    def test_denominator_is_smaller_valid_count(self):
        """Test that the agreeing count is divided by the smaller valid count."""
        a = RangeImage.from_grid(np.array([[5.0, 5.0, 5.0, 5.0]]))
        b = RangeImage.from_grid(np.array([[5.5, 9.0, -1.0, -1.0]]))
        assert overlap(a, b, 1.0) == pytest.approx(0.5)

    def test_empty_image_gives_zero(self):
        """Test that an image without valid pixels overlaps nothing."""
        a = RangeImage.from_grid(np.array([[5.0, 5.0]]))
        b = RangeImage.empty(1, 2)
        assert overlap(a, b) == 0.0

    def test_shape_mismatch_raises(self, rng):
        """Test that images of different sizes are rejected."""
        with pytest.raises(ShapeError) as exc_info:
            overlap(RangeImage.empty(2, 3), RangeImage.empty(3, 2))
        assert "shapes differ" in str(exc_info.value)

    def test_nonpositive_delta_raises(self, rng):
        """Test that delta must be positive."""
        image = random_image(rng)
        with pytest.raises(DataError) as exc_info:
            overlap(image, image, 0.0)
        assert "delta" in str(exc_info.value)


class TestPairLabeller:
    """Tests for dense overlap table construction."""

    @pytest.fixture
    def scans(self, rng, sensor):
        cloud = pixel_centred_cloud(rng, sensor, 300)
        poses = [Pose.from_yaw(0.0, x=0.5 * k) for k in range(4)]
        return [cloud] * 4, poses

    def test_diagonal_is_one(self, scans, sensor):
        """Test that every scan fully overlaps itself."""
        clouds, poses = scans
        table = build_pair_labels(clouds, poses, sensor)
        np.testing.assert_array_equal(np.diag(table.values), np.ones(4, dtype=np.float32))
        assert np.all((table.values >= 0) & (table.values <= 1))

    def test_gate_radius_skips_distant_pairs(self, scans, sensor):
        """Test that pairs farther apart than the gate radius stay zero."""
        clouds, poses = scans
        table = build_pair_labels(clouds, poses, sensor, gate_radius=0.6)
        assert table.values[0, 2] == 0.0
        assert table.values[0, 3] == 0.0

    def test_workers_do_not_change_result(self, scans, sensor):
        """Test that the threaded build equals the sequential one."""
        clouds, poses = scans
        single = build_pair_labels(clouds, poses, sensor, workers=1)
        threaded = build_pair_labels(clouds, poses, sensor, workers=3)
        np.testing.assert_array_equal(single.values, threaded.values)

    def test_progress_reported(self, scans, sensor):
        """Test that progress is sent once per row after the setup update."""
        clouds, poses = scans
        callback = Mock()
        PairLabeller(clouds, poses, sensor, progress_callback=callback).build()
        assert callback.call_count == 5
        assert callback.call_args[0][0].current == 4

    def test_cancellation(self, scans, sensor):
        """Test that a set cancel event stops labelling."""
        clouds, poses = scans
        event = threading.Event()
        event.set()
        with pytest.raises(TrainingCancelled):
            PairLabeller(clouds, poses, sensor, cancel_event=event).build()

    def test_mismatched_inputs_raise(self, scans, sensor):
        """Test that clouds and poses must pair up."""
        clouds, poses = scans
        with pytest.raises(DataError) as exc_info:
            PairLabeller(clouds, poses[:2], sensor)
        assert "4 clouds but 2 poses" in str(exc_info.value)


class TestOverlapTable:
    """Tests for positive and negative lookups."""

    def test_positives_exclude_self(self, band_table):
        assert band_table.positives(5) == [3, 4, 6, 7]

    def test_negatives(self, band_table):
        assert band_table.negatives(0) == list(range(3, 12))

    def test_unknown_id_raises(self, band_table):
        with pytest.raises(DataError) as exc_info:
            band_table.index_of(99)
        assert "99" in str(exc_info.value)


class TestSampleTrainingTuple:
    """Tests for positive/negative sampling."""

    def test_windows_and_counts(self, band_table):
        """Test that the tuple holds windows ending at the sampled anchors."""
        sample = sample_training_tuple(band_table, 6, [0, 0, 0], n_pos=2, n_neg=3)
        assert sample.query == window_for(6)
        assert len(sample.positives) == 2
        assert len(sample.negatives) == 3
        assert all(band_table.is_positive(6, p) for p in sample.positive_ids)
        assert not any(band_table.is_positive(6, n) for n in sample.negative_ids)

    def test_same_seed_same_tuple(self, band_table):
        """Test that sampling is reproducible from the seed."""
        a = sample_training_tuple(band_table, 6, [1, 2, 3], n_pos=2, n_neg=3)
        b = sample_training_tuple(band_table, 6, [1, 2, 3], n_pos=2, n_neg=3)
        assert a == b

    def test_eligible_restricts_pools(self, band_table):
        """Test that only eligible anchors are sampled."""
        eligible = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11]
        sample = sample_training_tuple(band_table, 6, 0, n_pos=4, n_neg=4, eligible=eligible)
        assert set(sample.positive_ids + sample.negative_ids) <= set(eligible)

    def test_too_few_positives_raises(self, band_table):
        """Test that a short positive pool reports the deficit."""
        with pytest.raises(SamplingError) as exc_info:
            sample_training_tuple(band_table, 0, 0, n_pos=3, n_neg=1)
        assert "1 positive(s) short (2 of 3)" in str(exc_info.value)

    def test_eligible_queries(self, band_table):
        """Test that queries need enough positives and negatives."""
        assert eligible_queries(band_table, 4, 1) == [2, 3, 4, 5, 6, 7, 8, 9]
        assert eligible_queries(band_table, 5, 1) == []

    def test_empty_scan_is_not_its_own_neighbour(self, band_table):
        """Test that a scan with zero self-overlap is counted on neither side."""
        band_table.values[5, 5] = 0.0
        assert 5 not in band_table.negatives(5)
        assert 5 in eligible_queries(band_table, 4, 7)
        assert 5 not in eligible_queries(band_table, 4, 8)
        sample = sample_training_tuple(band_table, 5, 0, n_pos=4, n_neg=7)
        assert 5 not in sample.negative_ids
