"""Sequence descriptor network.

Per scan, an OverlapNetLeg encoder collapses the range image height to one
row of ``c`` channels and a transformer refines it; coarse and refined
features are stacked into a ``(2c, w)`` feature volume. Every three
consecutive volumes are laid side by side, mixed by a second transformer and
aggregated by NetVLAD into a 256-dim sub-descriptor. GeM pooling over the
sub-descriptors of an ``m``-scan sequence gives the global descriptor.

Nothing in the network looks at column positions: convolutions have kernel
width 1, attention carries no positional encoding and NetVLAD treats columns
as a set. A yaw rotation by a whole number of azimuth steps therefore leaves
every descriptor unchanged.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.cluster.vq import kmeans2

from .config import DESCRIPTOR_DIM, ModelConfig
from .exceptions import ConfigError, DataError, ShapeError
from .layers import (
    AttentionConfig,
    Conv2d,
    Linear,
    Module,
    PointwiseConvBlock,
    TransformerBlock,
)
from .models import WINDOW, RangeImage, SensorModel, StreamState
from .nn import Tensor, concat, l2_normalize, no_grad, softmax, stack

logger = logging.getLogger(__name__)

GEM_EPS = 1e-6

ImageLike = Union[RangeImage, np.ndarray]


# ----------------------------------------------------------------------------
# Building blocks
# ----------------------------------------------------------------------------

class OverlapNetLeg(Module):
    """Strided convolutions with kernel width 1 that bring the height to 1."""

    def __init__(self, cfg: ModelConfig, height: int, rng: np.random.Generator):
        super().__init__()
        self.layout = cfg.leg_layout(height)
        self.convs: List[Conv2d] = []
        for i, (c_in, c_out, kh, stride) in enumerate(self.layout):
            conv = Conv2d(c_in, c_out, (kh, 1), (stride, 1), rng)
            self.convs.append(self.add_module(f'conv{i}', conv))

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x).relu()
        c, h, w = x.shape
        return x.reshape(c, w)


def _mixer(kind: str, d: int, heads: int, ffn_mult: int, rng: np.random.Generator) -> Module:
    if kind == 'conv':
        return PointwiseConvBlock(d, rng)
    return TransformerBlock(AttentionConfig(d, heads), ffn_mult, rng)


class SingleScanModule(Module):
    def __init__(self, cfg: ModelConfig, height: int, rng: np.random.Generator):
        super().__init__()
        self.leg = self.add_module('leg', OverlapNetLeg(cfg, height, rng))
        self.transformer = self.add_module('transformer', _mixer(cfg.sst, cfg.c, cfg.heads_sst, cfg.ffn_mult, rng))

    def forward(self, x: Tensor) -> Tensor:
        coarse = self.leg(x)
        return concat([coarse, self.transformer(coarse)], axis=0)


class NetVLAD(Module):
    """Soft-assignment residual aggregation over the columns of a (D, N) input.

    Columns are L2 normalised before they are assigned to centroids.
    """

    def __init__(self, dim: int, clusters: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.clusters = clusters
        self.assign = self.add_module('assign', Linear(dim, clusters, rng))
        self.centroids = self.add_param('centroids', rng.normal(0.0, 1.0 / math.sqrt(dim), size=(clusters, dim)))

    def forward(self, x: Tensor) -> Tensor:
        x = l2_normalize(x, axis=0)
        a = softmax(self.assign(x), axis=0)  # (K, N)
        residuals = a @ x.T - a.sum(axis=1, keepdims=True) * self.centroids  # (K, D)
        vlad = l2_normalize(residuals, axis=1)
        return l2_normalize(vlad.reshape(-1), axis=0)

    def init_from_features(self, features: np.ndarray, rng: np.random.Generator, iterations: int = 20) -> float:
        """Move centroids to k-means centres of sample columns ``features`` (N, D).

        The assignment weights point at the normalised centroids, scaled so the
        nearest centroid takes about 99% of a typical column. Returns that scale.
        """
        x = np.asarray(features, dtype=np.float64)
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        distinct = np.unique(x, axis=0)
        if distinct.shape[0] < self.clusters:
            raise DataError(f"need {self.clusters} distinct feature columns to place centroids, "
                            f"got {distinct.shape[0]}")
        seeds = distinct[rng.choice(distinct.shape[0], size=self.clusters, replace=False)]
        centroids, _ = kmeans2(x, seeds, iter=iterations, minit='matrix', missing='warn')
        unit = centroids / np.maximum(np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)

        scale = 1.0
        if self.clusters > 1:
            dots = np.sort(unit @ x.T, axis=0)
            gap = float(np.mean(dots[-1] - dots[-2]))
            scale = -math.log(0.01) / max(gap, 1e-6)

        dtype = self.centroids.dtype
        self.centroids.data = np.ascontiguousarray(centroids, dtype=dtype)
        self.assign.weight.data = np.ascontiguousarray(scale * unit, dtype=dtype)
        self.assign.bias.data = np.zeros_like(self.assign.bias.data)
        return scale


class MultiScanModule(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = 2 * cfg.c
        self.transformer = self.add_module('transformer', _mixer(cfg.mst, d, cfg.heads_mst, cfg.ffn_mult, rng))
        self.vlad = self.add_module('vlad', NetVLAD(d, cfg.vlad_clusters, rng))
        self.mlp = self.add_module('mlp', Linear(cfg.vlad_clusters * d, DESCRIPTOR_DIM, rng))
        # no common offset in the initial descriptors
        self.mlp.bias.data = np.zeros_like(self.mlp.bias.data)

    def mix(self, x1: Tensor, x2: Tensor, x3: Tensor) -> Tensor:
        """Transformer output over the three volumes laid side by side, (2c, 3w)."""
        if not (x1.shape == x2.shape == x3.shape):
            raise ShapeError(f"window features differ in shape: {x1.shape}, {x2.shape}, {x3.shape}")
        return self.transformer(concat([x1, x2, x3], axis=1))

    def forward(self, x1: Tensor, x2: Tensor, x3: Tensor) -> Tensor:
        return l2_normalize(self.mlp(self.vlad(self.mix(x1, x2, x3))), axis=0)


def _p_tensor(p, dtype) -> Tensor:
    if isinstance(p, Tensor):
        return p
    if p < 1:
        raise ConfigError(f"GeM exponent must be at least 1, got {p}")
    return Tensor(np.full((1,), p), dtype=dtype)


def gem_pool(subs: Union[Tensor, np.ndarray, Sequence], p: Union[float, Tensor] = 3.0) -> Tensor:
    """Element-wise generalised mean over a set of descriptors, then L2 normalised.

    ``subs`` is (S, D). The power mean is evaluated relative to the per-element
    maximum, which keeps large exponents finite and leaves the value unchanged.
    """
    if not isinstance(subs, Tensor):
        if isinstance(subs, (list, tuple)) and subs and isinstance(subs[0], Tensor):
            subs = stack(subs)
        else:
            subs = Tensor(np.asarray(subs, dtype=np.float32) if len(subs) else np.zeros((0, 0)))
    if subs.ndim != 2 or subs.shape[0] == 0:
        raise DataError("cannot pool an empty set of sub-descriptors")

    p = _p_tensor(p, subs.dtype)
    log_x = subs.clamp_min(GEM_EPS).log()
    shift = log_x.data.max(axis=0)
    power_mean = ((log_x - shift) * p).exp().mean(axis=0)
    pooled = (power_mean.log() / p + shift).exp()
    return l2_normalize(pooled, axis=0)


class GeM(Module):
    """GeM pooling with a learned exponent kept at ``p = 1 + softplus(raw) >= 1``."""

    def __init__(self, p_init: float = 3.0):
        super().__init__()
        excess = max(p_init - 1.0, GEM_EPS)
        self.raw_p = self.add_param('raw_p', np.array([math.log(math.expm1(excess))]))

    def p(self) -> Tensor:
        return self.raw_p.softplus() + 1.0

    @property
    def p_value(self) -> float:
        return float(self.p().data[0])

    def forward(self, subs: Tensor) -> Tensor:
        return gem_pool(subs, self.p())


# ----------------------------------------------------------------------------
# Full network
# ----------------------------------------------------------------------------

class SeqOT(Module):
    """Sequence-to-descriptor network with batch and streaming inference."""

    def __init__(self, cfg: ModelConfig, sensor: SensorModel, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        self.sensor = sensor.validate()
        rng = np.random.default_rng(seed)
        self.ssm = self.add_module('ssm', SingleScanModule(cfg, sensor.height, rng))
        self.msm = self.add_module('msm', MultiScanModule(cfg, rng))
        self.gem = self.add_module('gem', GeM(cfg.gem_p_init))
        logger.debug("built SeqOT with %d parameters", self.param_count())

    @property
    def seq_len(self) -> int:
        return self.cfg.seq_len_m

    def image_tensor(self, image: ImageLike) -> Tensor:
        """(1, h, w) network input; ranges are scaled by max range, invalid pixels are 0."""
        if isinstance(image, RangeImage):
            grid, mask = image.grid, image.mask
        else:
            grid = np.asarray(image)
            mask = grid > 0
        expected = (self.sensor.height, self.sensor.width)
        if grid.shape != expected:
            raise ShapeError(f"range image shape {grid.shape} does not match sensor {expected}")
        values = np.where(mask, grid / self.sensor.max_range, 0.0)
        return Tensor(values.reshape(1, *expected), dtype=self.dtype)

    def ssm_forward(self, image: ImageLike) -> Tensor:
        return self.ssm(self.image_tensor(image))

    def msm_forward(self, x1: Tensor, x2: Tensor, x3: Tensor) -> Tensor:
        return self.msm(x1, x2, x3)

    def sub_descriptors(self, images: Sequence[ImageLike]) -> Tensor:
        """(m - 2, 256) sub-descriptors of every window of three consecutive scans."""
        if len(images) < WINDOW:
            raise DataError(f"sequence too short: {len(images)} scans, need at least {WINDOW}")
        features = [self.ssm_forward(image) for image in images]
        return stack([self.msm(*features[t - 2:t + 1]) for t in range(2, len(features))])

    def seqot_forward(self, images: Sequence[ImageLike]) -> Tensor:
        return self.gem(self.sub_descriptors(images))

    def forward(self, images: Sequence[ImageLike]) -> Tensor:
        return self.seqot_forward(images)

    def describe(self, images: Sequence[ImageLike]) -> np.ndarray:
        with no_grad():
            return self.seqot_forward(images).data.astype(np.float32)

    def new_stream(self) -> StreamState:
        return StreamState(seq_len=self.seq_len)

    def stream_update(
        self,
        state: StreamState,
        image: ImageLike,
        scan_id: Optional[int] = None,
    ) -> Tuple[StreamState, Optional[np.ndarray]]:
        """Consume one scan; returns the current global descriptor or None while warming up.

        One single-scan forward runs per call. The descriptor pools the newest
        ``min(m - 2, available)`` sub-descriptors.
        """
        if scan_id is None:
            scan_id = 0 if state.last_id is None else state.last_id + 1
        elif state.last_id is not None and scan_id <= state.last_id:
            raise DataError(f"stream scan id {scan_id} does not follow {state.last_id}")

        with no_grad():
            feature = self.ssm_forward(image)
            descriptor = None
            if len(state.features) >= WINDOW - 1:
                previous = [Tensor(f, dtype=feature.dtype) for f in list(state.features)[-2:]]
                sub = self.msm(previous[0], previous[1], feature)
                cached = [Tensor(s, dtype=sub.dtype) for s in state.sub_descriptors]
                descriptor = self.gem(stack(cached + [sub])).data.astype(np.float32)
                state.sub_descriptors.append(sub.data)
                state.sub_descriptor_ids.append(scan_id)
            state.features.append(feature.data)
            state.feature_ids.append(scan_id)
        state.last_id = scan_id
        return state, descriptor

    def frozen_names(self) -> List[str]:
        """Parameters that phase-two training leaves untouched."""
        return [name for name, _ in self.named_parameters() if not name.startswith('gem.')]


def param_count(cfg: ModelConfig, sensor: Optional[SensorModel] = None) -> int:
    """Exact number of learnable scalars; the image width does not enter it."""
    sensor = sensor or SensorModel(width=8)
    return SeqOT(cfg, sensor).param_count()
