"""Two-phase overlap-supervised training.

Phase 1 trains the single-scan and multi-scan modules with a lazy triplet
loss on sub-descriptors of three-scan windows. Phase 2 freezes them, caches
the sub-descriptor of every window and trains only the GeM exponent with the
same loss on global descriptors of ``m``-scan sequences.

All randomness derives from the seed, the epoch and the step index, so a run
resumed from a checkpoint continues exactly as an uninterrupted one.
"""

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .config import TrainConfig
from .exceptions import DataError, ShapeError, TrainingCancelled, TrainingError
from .formats import read_checkpoint, read_index_rows, write_checkpoint, write_index_rows
from .model import SeqOT
from .models import WINDOW, OverlapTable, ProgressUpdate, RangeImage, TrainingResult, TrainingTuple, window_for
from .nn import Tensor, no_grad, stack
from .overlap import eligible_queries, sample_training_tuple

logger = logging.getLogger(__name__)

ImageSource = Union[Sequence[RangeImage], Mapping[int, RangeImage]]

OPTIM_PREFIX = 'optim.'
EPOCH_KEY = 'train.epoch'

# spawn key of the random stream that picks centroid sample windows
VLAD_INIT_KEY = 1


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------

def squared_distances(query: Tensor, others: Tensor) -> Tensor:
    """Squared Euclidean distance of each row of ``others`` (S, D) to ``query`` (D,)."""
    diff = others - query
    return (diff * diff).sum(axis=1)


def triplet_loss_from_distances(d_pos: Tensor, d_neg: Tensor, margin: float) -> Tensor:
    """Sum over negatives of ``max(0, margin + max_p d_pos - d_neg)``."""
    if d_pos.shape[0] == 0 or d_neg.shape[0] == 0:
        raise DataError("triplet loss needs at least one positive and one negative")
    hardest = d_pos[int(np.argmax(d_pos.data))]
    return (d_neg * -1.0 + hardest + margin).relu().sum()


def triplet_loss(query: Tensor, positives: Tensor, negatives: Tensor, margin: float) -> Tensor:
    """Lazy triplet loss of a query descriptor against stacked positives and negatives."""
    if positives.ndim != 2 or negatives.ndim != 2 or positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise DataError("triplet loss needs non-empty (S, D) positive and negative sets")
    if positives.shape[1] != query.shape[0] or negatives.shape[1] != query.shape[0]:
        raise ShapeError(f"descriptor dims differ: query {query.shape}, "
                         f"positives {positives.shape}, negatives {negatives.shape}")
    return triplet_loss_from_distances(squared_distances(query, positives),
                                       squared_distances(query, negatives), margin)


# The sub-descriptor and global losses share one formula
triplet_loss_sub = triplet_loss
triplet_loss_global = triplet_loss


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments per parameter name."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> 'OptimizerState':
        return cls(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps_opt)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for name in self.m:
            state[f"{OPTIM_PREFIX}m.{name}"] = self.m[name]
            state[f"{OPTIM_PREFIX}v.{name}"] = self.v[name]
        state[f"{OPTIM_PREFIX}step"] = np.array([self.step], dtype=np.float32)
        return state

    def load_state_dict(self, tensors: Mapping[str, np.ndarray]):
        self.m.clear()
        self.v.clear()
        for key, value in tensors.items():
            if key.startswith(f"{OPTIM_PREFIX}m."):
                self.m[key[len(OPTIM_PREFIX) + 2:]] = np.array(value, dtype=np.float32)
            elif key.startswith(f"{OPTIM_PREFIX}v."):
                self.v[key[len(OPTIM_PREFIX) + 2:]] = np.array(value, dtype=np.float32)
        step = tensors.get(f"{OPTIM_PREFIX}step")
        self.step = int(step[0]) if step is not None else 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
):
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient of {name} has shape {grad.shape}, parameter {param.shape}")
        dtype = param.dtype
        m = state.m.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=dtype)
            state.v[name] = np.zeros(param.shape, dtype=dtype)
        v = state.v[name]
        if m.shape != param.shape:
            raise ShapeError(f"optimizer state of {name} has shape {m.shape}, parameter {param.shape}")
        m = (b1 * m + (1.0 - b1) * grad).astype(dtype)
        v = (b2 * v + (1.0 - b2) * grad * grad).astype(dtype)
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(dtype)


# ----------------------------------------------------------------------------
# Sub-descriptor cache
# ----------------------------------------------------------------------------

class SubDescriptorCache:
    """Sub-descriptors keyed by the id of the last scan of their window."""

    def __init__(self, ids: Iterable[int], rows: np.ndarray):
        self.ids = np.asarray(list(ids), dtype=np.int64)
        self.rows = np.asarray(rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[0] != self.ids.shape[0]:
            raise DataError(f"cache has {self.ids.shape[0]} ids but rows of shape {self.rows.shape}")
        self._position = {int(i): k for k, i in enumerate(self.ids)}
        if len(self._position) != len(self.ids):
            raise DataError("duplicate window id in sub-descriptor cache")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, window_id: int) -> bool:
        return int(window_id) in self._position

    def window_ids(self, anchor: int, seq_len: int) -> List[int]:
        """Windows pooled for the sequence that ends at ``anchor``."""
        return list(range(anchor - seq_len + WINDOW, anchor + 1))

    def sequence_rows(self, anchor: int, seq_len: int) -> Optional[np.ndarray]:
        """(m - 2, D) rows of a full sequence, or None if any window is missing."""
        ids = self.window_ids(anchor, seq_len)
        if not all(i in self._position for i in ids):
            return None
        return self.rows[[self._position[i] for i in ids]]

    def sequence_anchors(self, seq_len: int) -> List[int]:
        return [int(a) for a in self.ids if self.sequence_rows(int(a), seq_len) is not None]

    def save(self, path: Path):
        write_index_rows(path, self.ids.astype(np.uint64), self.rows)

    @classmethod
    def load(cls, path: Path) -> 'SubDescriptorCache':
        if not Path(path).exists():
            raise TrainingError(f"sub-descriptor cache not found: {path}")
        ids, rows = read_index_rows(path)
        return cls(ids.astype(np.int64), rows)


def compute_sub_descriptors(
    model: SeqOT,
    images: ImageSource,
    window_ids: Sequence[int],
    progress_callback: Optional[Callable[[ProgressUpdate], None]] = None,
) -> SubDescriptorCache:
    """Run the frozen network once per scan and once per window."""
    features: Dict[int, Tensor] = {}
    rows = []
    total = len(window_ids)
    with no_grad():
        for k, anchor in enumerate(window_ids):
            window = (anchor - 2, anchor - 1, anchor)
            for scan_id in window:
                if scan_id not in features:
                    features[scan_id] = model.ssm_forward(images[scan_id])
            rows.append(model.msm(*(features[s] for s in window)).data.astype(np.float32))
            # features older than the current window are never needed again
            for stale in [s for s in features if s < anchor - 2]:
                del features[stale]
            if progress_callback and ((k + 1) % 50 == 0 or k + 1 == total):
                progress_callback(ProgressUpdate("Sub-descriptors", k + 1, total, f"Window {k + 1}/{total}"))
    dim = rows[0].shape[0] if rows else 0
    return SubDescriptorCache(window_ids, np.stack(rows) if rows else np.zeros((0, dim), np.float32))


def describe_passes(
    model: SeqOT,
    images: ImageSource,
    passes: Sequence[Sequence[int]],
    stream: bool = False,
    progress_callback: Optional[Callable[[ProgressUpdate], None]] = None,
) -> List[Tuple[int, np.ndarray]]:
    """Global descriptor of every scan that ends a full ``m``-scan sequence within its pass.

    Stream mode feeds each pass scan by scan through ``stream_update``; batch
    mode caches every window's sub-descriptor once and pools each sequence
    from the cache, which equals ``seqot_forward`` on the same scans.
    """
    m = model.seq_len
    out: List[Tuple[int, np.ndarray]] = []
    for run in passes:
        run = [int(s) for s in run]
        if len(run) < m:
            continue
        if stream:
            state = model.new_stream()
            for k, scan_id in enumerate(run):
                state, descriptor = model.stream_update(state, images[scan_id], scan_id)
                if k >= m - 1:
                    out.append((scan_id, descriptor))
        else:
            cache = compute_sub_descriptors(model, images, run[WINDOW - 1:], progress_callback)
            with no_grad():
                for k in range(m - 1, len(run)):
                    rows = cache.rows[k - m + 1:k - 1]
                    out.append((run[k], model.gem(Tensor(rows, dtype=model.dtype)).data.astype(np.float32)))
        if progress_callback:
            progress_callback(ProgressUpdate("Describing", len(out), 0, f"{len(out)} descriptors"))
    return out


# ----------------------------------------------------------------------------
# Trainers
# ----------------------------------------------------------------------------

class _Trainer:
    """Epoch loop, progress reporting, cancellation and checkpointing."""

    phase = 0
    phase_name = ""

    def __init__(
        self,
        model: SeqOT,
        table: OverlapTable,
        cfg: TrainConfig,
        eligible: Sequence[int],
        progress_callback: Optional[Callable[[ProgressUpdate], None]] = None,
        cancel_event: Optional[threading.Event] = None,
    ):
        self.model = model
        self.table = table
        self.cfg = cfg.validate()
        self.eligible = [int(e) for e in eligible]
        self.progress_callback = progress_callback
        self.cancel_event = cancel_event
        self.optimizer = OptimizerState.from_config(cfg)
        self.epoch = 0
        self.epoch_losses: List[float] = []
        self.learning_rates: List[float] = []
        self.queries = eligible_queries(table, cfg.n_pos, cfg.n_neg, self.eligible)
        if not self.queries:
            raise TrainingError(
                f"no eligible queries: no anchor has {cfg.n_pos} positives and {cfg.n_neg} negatives")

    # -- hooks -------------------------------------------------------------

    def prepare(self):
        """Runs once before the first step of a run that starts from scratch."""

    def trainable(self) -> Dict[str, Tensor]:
        raise NotImplementedError

    def loss_for(self, sample: TrainingTuple) -> Tensor:
        raise NotImplementedError

    @property
    def base_lr(self) -> float:
        raise NotImplementedError

    # -- loop --------------------------------------------------------------

    def report_progress(self, phase: str, current: int = 0, total: int = 0, message: str = ""):
        """Send progress update."""
        if self.progress_callback:
            self.progress_callback(ProgressUpdate(phase, current, total, message))

    def check_cancelled(self):
        if self.cancel_event and self.cancel_event.is_set():
            raise TrainingCancelled("Training cancelled by user")

    def epoch_queries(self, epoch: int) -> List[int]:
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.queries))
        queries = [self.queries[k] for k in order]
        if self.cfg.queries_per_epoch is not None:
            queries = queries[:self.cfg.queries_per_epoch]
        return queries

    def sample(self, query_id: int, epoch: int, step: int) -> TrainingTuple:
        return sample_training_tuple(self.table, query_id, [self.cfg.seed, epoch, step],
                                     self.cfg.n_pos, self.cfg.n_neg, self.eligible)

    def train_step(self, sample: TrainingTuple, lr: float) -> float:
        params = self.trainable()
        for p in self.model.parameters():
            p.grad = None
        loss = self.loss_for(sample)
        loss.backward()
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adam_step(params, grads, self.optimizer, lr)
        return float(loss.data)

    def run_epoch(self, epoch: int) -> float:
        lr = self.cfg.lr_at(self.base_lr, epoch)
        queries = self.epoch_queries(epoch)
        losses = []
        for step, query_id in enumerate(queries):
            self.check_cancelled()
            losses.append(self.train_step(self.sample(query_id, epoch, step), lr))
            self.report_progress(self.phase_name, step + 1, len(queries),
                                 f"Epoch {epoch + 1}, step {step + 1}/{len(queries)}, loss {losses[-1]:.4f}")
        mean_loss = float(np.mean(losses)) if losses else 0.0
        self.epoch_losses.append(mean_loss)
        self.learning_rates.append(lr)
        self.epoch = epoch + 1
        logger.info("%s epoch %d: mean loss %.5f, lr %.3g", self.phase_name, epoch + 1, mean_loss, lr)
        return mean_loss

    def run(self, epochs: int) -> TrainingResult:
        """Train until ``epochs`` epochs have completed, starting from ``self.epoch``."""
        start = self.epoch
        steps = 0
        try:
            if self.optimizer.step == 0 and start < epochs:
                self.check_cancelled()
                self.prepare()
            for epoch in range(start, epochs):
                self.check_cancelled()
                self.run_epoch(epoch)
                steps += len(self.epoch_queries(epoch))
            self.report_progress("Complete", self.epoch, epochs, f"{self.phase_name} complete")
            return TrainingResult(success=True, phase=self.phase, epochs_run=self.epoch - start,
                                  steps_run=steps, epoch_losses=list(self.epoch_losses),
                                  learning_rates=list(self.learning_rates))
        except TrainingCancelled as e:
            return TrainingResult(success=False, phase=self.phase, epochs_run=self.epoch - start,
                                  steps_run=steps, epoch_losses=list(self.epoch_losses),
                                  learning_rates=list(self.learning_rates), error_message=str(e))

    # -- checkpoints -------------------------------------------------------

    def checkpoint(self) -> Dict[str, np.ndarray]:
        tensors = dict(self.model.state_dict())
        tensors.update(self.optimizer.state_dict())
        tensors[EPOCH_KEY] = np.array([self.epoch], dtype=np.float32)
        return tensors

    def save_checkpoint(self, path: Path):
        write_checkpoint(path, self.checkpoint())
        logger.info("wrote %s checkpoint after epoch %d to %s", self.phase_name, self.epoch, path)

    def resume(self, tensors: Mapping[str, np.ndarray]):
        """Restore model weights, optimizer moments and the epoch counter."""
        self.model.load_state_dict({k: v for k, v in tensors.items() if not _is_training_key(k)})
        self.optimizer.load_state_dict(tensors)
        epoch = tensors.get(EPOCH_KEY)
        self.epoch = int(epoch[0]) if epoch is not None else 0


def _is_training_key(name: str) -> bool:
    return name.startswith(OPTIM_PREFIX) or name == EPOCH_KEY


def model_weights(tensors: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Network parameters of a checkpoint, without optimizer state."""
    return {k: v for k, v in tensors.items() if not _is_training_key(k)}


def load_model_checkpoint(model: SeqOT, path: Path):
    if not Path(path).exists():
        raise TrainingError(f"checkpoint not found: {path}")
    model.load_state_dict(model_weights(read_checkpoint(path)))


class Phase1Trainer(_Trainer):
    """Trains the single-scan and multi-scan modules on three-scan windows."""

    phase = 1
    phase_name = "Phase 1"

    def __init__(self, model: SeqOT, images: ImageSource, table: OverlapTable, cfg: TrainConfig,
                 eligible: Sequence[int], **kwargs):
        super().__init__(model, table, cfg, eligible, **kwargs)
        self.images = images

    @property
    def base_lr(self) -> float:
        return self.cfg.lr_phase1

    def trainable(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.model.named_parameters() if not name.startswith('gem.')}

    def prepare(self):
        """Place the NetVLAD centroids on k-means centres of mixed window features."""
        count = min(self.cfg.vlad_init_windows, len(self.eligible))
        if count == 0:
            return
        rng = np.random.default_rng(np.random.SeedSequence(self.cfg.seed, spawn_key=(VLAD_INIT_KEY,)))
        windows = sorted(int(a) for a in rng.choice(self.eligible, size=count, replace=False))
        features: Dict[int, Tensor] = {}
        columns = []
        with no_grad():
            for anchor in windows:
                window = window_for(anchor)
                for scan_id in window:
                    if scan_id not in features:
                        features[scan_id] = self.model.ssm_forward(self.images[scan_id])
                columns.append(self.model.msm.mix(*(features[s] for s in window)).data.T)
        try:
            scale = self.model.msm.vlad.init_from_features(np.concatenate(columns), rng)
        except DataError as e:
            logger.warning("keeping random NetVLAD centroids: %s", e)
            return
        logger.info("placed %d NetVLAD centroids from %d windows, assignment scale %.1f",
                    self.model.cfg.vlad_clusters, count, scale)

    def window_descriptor(self, window, features: Dict[int, Tensor]) -> Tensor:
        for scan_id in window:
            if scan_id not in features:
                features[scan_id] = self.model.ssm_forward(self.images[scan_id])
        return self.model.msm(*(features[s] for s in window))

    def loss_for(self, sample: TrainingTuple) -> Tensor:
        # scans shared between windows go through the single-scan module once
        features: Dict[int, Tensor] = {}
        query = self.window_descriptor(sample.query, features)
        positives = stack([self.window_descriptor(w, features) for w in sample.positives])
        negatives = stack([self.window_descriptor(w, features) for w in sample.negatives])
        return triplet_loss_sub(query, positives, negatives, self.cfg.margin)


class Phase2Trainer(_Trainer):
    """Trains GeM pooling on cached sub-descriptors; everything else stays frozen."""

    phase = 2
    phase_name = "Phase 2"

    def __init__(self, model: SeqOT, cache: SubDescriptorCache, table: OverlapTable, cfg: TrainConfig,
                 eligible: Optional[Sequence[int]] = None, **kwargs):
        if cache is None or len(cache) == 0:
            raise TrainingError("phase 2 needs a non-empty sub-descriptor cache")
        anchors = set(cache.sequence_anchors(model.seq_len))
        if eligible is not None:
            anchors &= {int(e) for e in eligible}
        super().__init__(model, table, cfg, sorted(anchors), **kwargs)
        self.cache = cache

    @property
    def base_lr(self) -> float:
        return self.cfg.lr_phase2

    def trainable(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.model.named_parameters() if name.startswith('gem.')}

    def global_descriptor(self, anchor: int) -> Tensor:
        rows = self.cache.sequence_rows(anchor, self.model.seq_len)
        if rows is None:
            raise TrainingError(f"sub-descriptor cache lacks the sequence ending at scan {anchor}")
        return self.model.gem(Tensor(rows, dtype=self.model.dtype))

    def loss_for(self, sample: TrainingTuple) -> Tensor:
        query = self.global_descriptor(sample.query_id)
        positives = stack([self.global_descriptor(a) for a in sample.positive_ids])
        negatives = stack([self.global_descriptor(a) for a in sample.negative_ids])
        return triplet_loss_global(query, positives, negatives, self.cfg.margin)


def window_anchors(scan_ids: Sequence[int], passes: Optional[Sequence[Sequence[int]]] = None) -> List[int]:
    """Scans that end a full three-scan window without crossing a pass boundary."""
    if passes is None:
        passes = [list(scan_ids)]
    anchors = []
    for run in passes:
        run = [int(s) for s in run]
        for k in range(WINDOW - 1, len(run)):
            if run[k] - run[k - WINDOW + 1] == WINDOW - 1:
                anchors.append(run[k])
    return anchors


def train_phase1(
    model: SeqOT,
    images: ImageSource,
    table: OverlapTable,
    cfg: TrainConfig,
    eligible: Optional[Sequence[int]] = None,
    epochs: Optional[int] = None,
    **kwargs,
) -> Tuple[TrainingResult, Dict[str, np.ndarray]]:
    """Phase-1 training; returns the result and the final checkpoint tensors."""
    if eligible is None:
        eligible = window_anchors([int(s) for s in table.scan_ids])
    trainer = Phase1Trainer(model, images, table, cfg, eligible, **kwargs)
    result = trainer.run(cfg.epochs if epochs is None else epochs)
    return result, trainer.checkpoint()


def train_phase2(
    model: SeqOT,
    cache: SubDescriptorCache,
    table: OverlapTable,
    cfg: TrainConfig,
    eligible: Optional[Sequence[int]] = None,
    epochs: Optional[int] = None,
    **kwargs,
) -> Tuple[TrainingResult, Dict[str, np.ndarray]]:
    """Phase-2 training; returns the result and the final checkpoint tensors."""
    trainer = Phase2Trainer(model, cache, table, cfg, eligible, **kwargs)
    result = trainer.run(cfg.epochs_phase2 if epochs is None else epochs)
    return result, trainer.checkpoint()
