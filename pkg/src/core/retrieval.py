"""Descriptor index, exhaustive top-K search and recall / precision metrics.

Distances are squared Euclidean, computed in float64 from the stored float32
rows. Equal distances rank the lower scan id first, so results never depend
on insertion order.
"""

import json
import logging
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError, DataError
from .formats import read_index_rows, write_index_rows
from .models import EvalReport, OverlapTable
from .training import SubDescriptorCache

logger = logging.getLogger(__name__)

Query = Tuple[int, np.ndarray]
Ranked = List[Tuple[int, float]]


class DescriptorIndex:
    """Immutable rows of (scan id, descriptor) in insertion order."""

    def __init__(self, ids: np.ndarray, descriptors: np.ndarray, metadata: Optional[dict] = None):
        ids = np.asarray(ids, dtype=np.uint64)
        descriptors = np.asarray(descriptors, dtype=np.float32)
        if descriptors.ndim != 2 or descriptors.shape[0] != ids.shape[0]:
            raise DataError(f"index needs one descriptor row per id, got {ids.shape[0]} ids "
                            f"and rows of shape {descriptors.shape}")
        unique, counts = np.unique(ids, return_counts=True)
        if np.any(counts > 1):
            raise DataError(f"duplicate scan id {int(unique[counts > 1][0])} in descriptor index")
        self.ids = ids.copy()
        self.descriptors = descriptors.copy()
        self.ids.flags.writeable = False
        self.descriptors.flags.writeable = False
        self.metadata = dict(metadata or {})
        self._rows64 = self.descriptors.astype(np.float64)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def row_of(self, scan_id: int) -> np.ndarray:
        hits = np.flatnonzero(self.ids == np.uint64(scan_id))
        if hits.size == 0:
            raise DataError(f"scan id {scan_id} is not in the index")
        return self.descriptors[hits[0]]

    def distances(self, query: np.ndarray) -> np.ndarray:
        query = np.asarray(query)
        if query.shape != (self.dim,):
            raise DataError(f"query has shape {query.shape}, index dimension is {self.dim}")
        diff = self._rows64 - query.astype(np.float32).astype(np.float64)
        return np.sum(diff * diff, axis=1)

    def query_top_k(self, query: np.ndarray, k: int) -> Ranked:
        if k < 1:
            raise ConfigError(f"top-k must be at least 1, got {k}")
        d = self.distances(query)
        order = np.lexsort((self.ids, d))[:min(k, len(self))]
        return [(int(self.ids[i]), float(d[i])) for i in order]

    # -- persistence -------------------------------------------------------

    @staticmethod
    def metadata_path(path: Path) -> Path:
        path = Path(path)
        return path.with_name(path.name + '.meta.json')

    def save(self, path: Path):
        write_index_rows(path, self.ids, self.descriptors)
        if self.metadata:
            self.metadata_path(path).write_text(json.dumps(self.metadata, indent=2, sort_keys=True),
                                                encoding='utf-8')
        logger.info("saved index of %d rows to %s", len(self), path)

    @classmethod
    def load(cls, path: Path) -> 'DescriptorIndex':
        ids, rows = read_index_rows(path)
        meta_path = cls.metadata_path(path)
        metadata = None
        if meta_path.exists():
            try:
                metadata = json.loads(meta_path.read_text(encoding='utf-8'))
            except json.JSONDecodeError as e:
                raise DataError(f"invalid index metadata {meta_path}: {e}") from None
        return cls(ids, rows, metadata)


def build_index(descriptors: Iterable[Query], metadata: Optional[dict] = None) -> DescriptorIndex:
    pairs = list(descriptors)
    if not pairs:
        raise DataError("cannot build an index from zero descriptors")
    dims = {np.asarray(d).shape for _, d in pairs}
    if len(dims) != 1:
        raise DataError(f"descriptors have mixed shapes: {sorted(dims)}")
    ids = np.array([int(i) for i, _ in pairs], dtype=np.uint64)
    return DescriptorIndex(ids, np.stack([np.asarray(d, dtype=np.float32) for _, d in pairs]), metadata)


def query_top_k(index: DescriptorIndex, query: np.ndarray, k: int) -> Ranked:
    return index.query_top_k(query, k)


# ----------------------------------------------------------------------------
# Ground truth
# ----------------------------------------------------------------------------

def _truth_columns(index: DescriptorIndex, truth: OverlapTable) -> np.ndarray:
    return np.array([truth.index_of(int(i)) for i in index.ids], dtype=np.int64)


def _has_reference(query_id: int, index: DescriptorIndex, truth: OverlapTable, columns: np.ndarray) -> bool:
    row = truth.values[truth.index_of(query_id), columns]
    return bool(np.any(row > truth.threshold32))


def _check_queries(queries: Sequence[Query]):
    if len(queries) == 0:
        raise DataError("empty query set")


def average_recall_at_n(
    queries: Sequence[Query],
    index: DescriptorIndex,
    truth: OverlapTable,
    n: int,
) -> Tuple[Optional[float], int]:
    """Fraction of queries with a true reference among their top ``n`` results.

    Queries without any true reference in the index are left out. Returns the
    recall (None when every query was left out) and the number left out.
    """
    recall, excluded, _ = _recall_table(queries, index, truth, [n])
    return recall[n], excluded


def _recall_table(
    queries: Sequence[Query],
    index: DescriptorIndex,
    truth: OverlapTable,
    n_values: Sequence[int],
    keep: int = 0,
) -> Tuple[Dict[int, Optional[float]], int, Dict[int, Ranked]]:
    _check_queries(queries)
    columns = _truth_columns(index, truth)
    depth = max(max(n_values), keep)
    hits = {n: 0 for n in n_values}
    excluded = 0
    top_lists: Dict[int, Ranked] = {}
    for query_id, descriptor in queries:
        ranked = index.query_top_k(descriptor, depth)
        if keep:
            top_lists[int(query_id)] = ranked[:keep]
        if not _has_reference(query_id, index, truth, columns):
            excluded += 1
            continue
        correct = [truth.is_positive(query_id, ref_id) for ref_id, _ in ranked]
        for n in n_values:
            if any(correct[:n]):
                hits[n] += 1
    evaluated = len(queries) - excluded
    recall = {n: (hits[n] / evaluated if evaluated else None) for n in n_values}
    return recall, excluded, top_lists


def precision_recall_curve(
    queries: Sequence[Query],
    index: DescriptorIndex,
    truth: OverlapTable,
    thresholds: Union[int, Sequence[float]] = 100,
) -> Tuple[List[Tuple[float, float, float]], float]:
    """Precision and recall of top-1 matches accepted below a distance threshold.

    A query is predicted a revisit when its top-1 distance is at most the
    threshold, and the prediction is correct when that match is a true
    reference. Recall counts against queries that have a true reference.
    Precision is 1.0 at thresholds with no predictions. Returns the samples
    ``(threshold, precision, recall)`` and the largest F1 score.
    """
    _check_queries(queries)
    columns = _truth_columns(index, truth)
    top_d = np.empty(len(queries))
    top_correct = np.zeros(len(queries), dtype=bool)
    has_ref = np.zeros(len(queries), dtype=bool)
    for k, (query_id, descriptor) in enumerate(queries):
        ref_id, distance = index.query_top_k(descriptor, 1)[0]
        top_d[k] = distance
        top_correct[k] = truth.is_positive(query_id, ref_id)
        has_ref[k] = _has_reference(query_id, index, truth, columns)

    if isinstance(thresholds, (int, np.integer)):
        thresholds = np.linspace(float(top_d.min()), float(top_d.max()), int(thresholds))
    positives = int(has_ref.sum())

    samples = []
    f1_max = 0.0
    for t in thresholds:
        predicted = top_d <= t
        n_pred = int(predicted.sum())
        tp = int(np.sum(predicted & top_correct))
        precision = tp / n_pred if n_pred else 1.0
        recall = tp / positives if positives else 0.0
        if precision + recall > 0:
            f1_max = max(f1_max, 2 * precision * recall / (precision + recall))
        samples.append((float(t), float(precision), float(recall)))
    return samples, float(f1_max)


def evaluate(
    queries: Sequence[Query],
    index: DescriptorIndex,
    truth: OverlapTable,
    k_values: Sequence[int] = (1, 5, 20),
    thresholds: Union[int, Sequence[float]] = 100,
    keep_top: int = 20,
) -> EvalReport:
    recall, excluded, top_lists = _recall_table(queries, index, truth, list(k_values), keep=keep_top)
    pr, f1_max = precision_recall_curve(queries, index, truth, thresholds)
    report = EvalReport(recall_at=recall, excluded_queries=excluded,
                        evaluated_queries=len(queries) - excluded, pr=pr, f1_max=f1_max, top_k=top_lists)
    logger.info("evaluated %d queries (%d excluded): %s", report.evaluated_queries, excluded,
                ", ".join(f"AR@{n}={v if v is None else round(v, 4)}" for n, v in recall.items()))
    return report


# ----------------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------------

def yaw_sweep(
    describe_queries: Callable[[float], Sequence[Query]],
    index: DescriptorIndex,
    truth: OverlapTable,
    angles_deg: Sequence[float],
) -> Dict[float, Optional[float]]:
    """AR@1 when every query scan is rotated by each yaw angle in degrees.

    ``describe_queries(angle)`` returns the query descriptors computed from
    rotated scans.
    """
    results = {}
    for angle in angles_deg:
        recall, _ = average_recall_at_n(describe_queries(float(angle)), index, truth, 1)
        results[float(angle)] = recall
        logger.info("yaw %.1f deg: AR@1=%s", angle, recall)
    return results


def sequence_length_sweep(
    cache: SubDescriptorCache,
    database_ids: Sequence[int],
    query_ids: Sequence[int],
    truth: OverlapTable,
    lengths: Sequence[int],
    pool: Callable[[np.ndarray], np.ndarray],
) -> Dict[int, Optional[float]]:
    """AR@1 of descriptors re-pooled from cached sub-descriptors at several sequence lengths.

    ``pool`` maps an (S, D) block of sub-descriptors to a global descriptor.
    Scans without a full sequence at a given length are skipped.
    """
    results: Dict[int, Optional[float]] = {}
    for m in lengths:
        def pooled(ids):
            out = []
            for anchor in ids:
                rows = cache.sequence_rows(int(anchor), m)
                if rows is not None:
                    out.append((int(anchor), pool(rows)))
            return out

        database = pooled(database_ids)
        queries = pooled(query_ids)
        if not database or not queries:
            results[int(m)] = None
            continue
        recall, _ = average_recall_at_n(queries, build_index(database), truth, 1)
        results[int(m)] = recall
        logger.info("sequence length %d: AR@1=%s over %d queries", m, recall, len(queries))
    return results
