"""Overlap supervision between anchor scans and training tuple sampling.

The overlap of scan j with scan i is the fraction of pixels valid in both the
range image of i and the reprojection of j into the frame of i whose ranges
agree within ``delta``, normalised by the smaller valid-pixel count.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import DataError, SamplingError, ShapeError, TrainingCancelled
from .models import (
    OverlapTable,
    PointCloud,
    Pose,
    ProgressUpdate,
    RangeImage,
    SensorModel,
    TrainingTuple,
    window_for,
)
from .rangeproj import project, reproject

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 1.0
DEFAULT_THRESHOLD = 0.3


def overlap(ri: RangeImage, rj_reproj: RangeImage, delta: float = DEFAULT_DELTA) -> float:
    """Overlap value in [0, 1] of a reprojected image against a reference image."""
    if ri.shape != rj_reproj.shape:
        raise ShapeError(f"range image shapes differ: {ri.shape} vs {rj_reproj.shape}")
    if not delta > 0:
        raise DataError(f"delta must be positive, got {delta}")

    denominator = min(ri.valid_count, rj_reproj.valid_count)
    if denominator == 0:
        return 0.0
    both = ri.mask & rj_reproj.mask
    diff = np.abs(ri.grid[both].astype(np.float64) - rj_reproj.grid[both].astype(np.float64))
    agree = int(np.count_nonzero(diff <= delta))
    return agree / denominator


class PairLabeller:
    """Builds the dense overlap table of a scan collection.

    Row i holds the overlap of every scan j reprojected into the frame of i.
    """

    def __init__(
        self,
        clouds: Sequence[PointCloud],
        poses: Sequence[Pose],
        sensor: SensorModel,
        delta: float = DEFAULT_DELTA,
        pos_threshold: float = DEFAULT_THRESHOLD,
        gate_radius: Optional[float] = None,
        scan_ids: Optional[Sequence[int]] = None,
        workers: int = 1,
        progress_callback: Optional[Callable[[ProgressUpdate], None]] = None,
        cancel_event: Optional[threading.Event] = None,
    ):
        if len(clouds) != len(poses):
            raise DataError(f"got {len(clouds)} clouds but {len(poses)} poses")
        if scan_ids is not None and len(scan_ids) != len(clouds):
            raise DataError(f"got {len(clouds)} clouds but {len(scan_ids)} scan ids")
        self.clouds = list(clouds)
        self.poses = list(poses)
        self.sensor = sensor
        self.delta = delta
        self.pos_threshold = pos_threshold
        self.gate_radius = gate_radius
        self.scan_ids = np.arange(len(clouds)) if scan_ids is None else np.asarray(scan_ids)
        self.workers = max(1, workers)
        self.progress_callback = progress_callback
        self.cancel_event = cancel_event

    def report_progress(self, phase: str, current: int = 0, total: int = 0, message: str = ""):
        """Send progress update."""
        if self.progress_callback:
            self.progress_callback(ProgressUpdate(phase, current, total, message))

    def check_cancelled(self):
        if self.cancel_event and self.cancel_event.is_set():
            raise TrainingCancelled("Labelling cancelled by user")

    def _row(self, i: int, reference: RangeImage) -> np.ndarray:
        n = len(self.clouds)
        row = np.zeros(n, dtype=np.float32)
        origin = self.poses[i].translation
        for j in range(n):
            if j == i:
                row[j] = 1.0
                continue
            if self.gate_radius is not None:
                if np.linalg.norm(self.poses[j].translation - origin) > self.gate_radius:
                    continue
            reprojected = reproject(self.clouds[j], self.poses[j], self.poses[i], self.sensor)
            row[j] = overlap(reference, reprojected, self.delta)
        return row

    def build(self) -> OverlapTable:
        n = len(self.clouds)
        for pose in self.poses:
            pose.validate()
        self.report_progress("Labelling", 0, n, "Projecting reference scans...")
        references = [project(cloud, self.sensor) for cloud in self.clouds]

        values = np.zeros((n, n), dtype=np.float32)
        if self.workers == 1:
            for i in range(n):
                self.check_cancelled()
                values[i] = self._row(i, references[i])
                self.report_progress("Labelling", i + 1, n, f"Labelled scan {i + 1}/{n}")
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures = [pool.submit(self._row, i, references[i]) for i in range(n)]
                for i, future in enumerate(futures):
                    self.check_cancelled()
                    values[i] = future.result()
                    self.report_progress("Labelling", i + 1, n, f"Labelled scan {i + 1}/{n}")

        logger.info("built %dx%d overlap table (delta=%.3f, threshold=%.3f, gate=%s)",
                    n, n, self.delta, self.pos_threshold, self.gate_radius)
        return OverlapTable(values=values, scan_ids=self.scan_ids,
                            delta=self.delta, pos_threshold=self.pos_threshold)


def build_pair_labels(
    clouds: Sequence[PointCloud],
    poses: Sequence[Pose],
    sensor: SensorModel,
    delta: float = DEFAULT_DELTA,
    pos_threshold: float = DEFAULT_THRESHOLD,
    gate_radius: Optional[float] = None,
    workers: int = 1,
) -> OverlapTable:
    """Dense overlap table over all anchor pairs, diagonal fixed to 1."""
    return PairLabeller(clouds, poses, sensor, delta=delta, pos_threshold=pos_threshold,
                        gate_radius=gate_radius, workers=workers).build()


def sample_training_tuple(
    table: OverlapTable,
    query_id: int,
    rng_seed,
    n_pos: int = 6,
    n_neg: int = 6,
    eligible: Optional[Sequence[int]] = None,
) -> TrainingTuple:
    """Draw positives and negatives for one query without replacement.

    ``eligible`` restricts both pools to anchors that own a full window.
    """
    positives = table.positives(query_id)
    negatives = table.negatives(query_id)
    if eligible is not None:
        allowed = set(int(e) for e in eligible)
        positives = [p for p in positives if p in allowed]
        negatives = [n for n in negatives if n in allowed]

    deficits = []
    if len(positives) < n_pos:
        deficits.append(f"{n_pos - len(positives)} positive(s) short ({len(positives)} of {n_pos})")
    if len(negatives) < n_neg:
        deficits.append(f"{n_neg - len(negatives)} negative(s) short ({len(negatives)} of {n_neg})")
    if deficits:
        raise SamplingError(f"query {query_id}: " + ", ".join(deficits))

    rng = np.random.default_rng(rng_seed)
    chosen_pos = rng.choice(len(positives), size=n_pos, replace=False)
    chosen_neg = rng.choice(len(negatives), size=n_neg, replace=False)
    return TrainingTuple(
        query=window_for(query_id),
        positives=[window_for(positives[k]) for k in sorted(chosen_pos)],
        negatives=[window_for(negatives[k]) for k in sorted(chosen_neg)],
    )


def eligible_queries(
    table: OverlapTable,
    n_pos: int,
    n_neg: int,
    eligible: Optional[Sequence[int]] = None,
) -> List[int]:
    """Anchors with enough positives and negatives among eligible anchors."""
    candidates = [int(s) for s in table.scan_ids] if eligible is None else [int(e) for e in eligible]
    allowed = set(candidates)
    mask = table.positive_mask()
    allowed_cols = np.array([int(s) in allowed for s in table.scan_ids])
    result = []
    for scan_id in candidates:
        i = table.index_of(scan_id)
        positive_row = mask[i] & allowed_cols
        negative_row = ~mask[i] & allowed_cols
        # the scan itself counts on whichever side its own overlap falls
        pos = int(positive_row.sum()) - int(positive_row[i])
        neg = int(negative_row.sum()) - int(negative_row[i])
        if pos >= n_pos and neg >= n_neg:
            result.append(scan_id)
    return result
