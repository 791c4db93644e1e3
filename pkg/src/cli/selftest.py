"""Invariance and gradient checks run by ``seqplace selftest``.

Every check builds its own inputs from a fixed seed, so the suite needs no
data on disk and gives the same verdict on every machine.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from src.core.exceptions import EquivarianceError
from src.core.model import SeqOT, gem_pool
from src.core.models import INVALID_RANGE, PointCloud, Pose, ProgressUpdate, RangeImage, SensorModel, SyntheticWorld
from src.core.config import ModelConfig
from src.core.datasets import SCAN_SPACING, SENSOR_HEIGHT, generate_world, simulate_scan
from src.core.layers import AttentionConfig, FeedForward, Linear, MultiHeadSelfAttention, TransformerBlock
from src.core.nn import Tensor, check_conv_config, concat, conv2d, grad_check, l2_normalize, layer_norm, softmax, stack
from src.core.overlap import overlap
from src.core.rangeproj import column_shift, project, yaw_rotate
from src.core.training import triplet_loss_global, triplet_loss_sub

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4
LINEAR_GRAD_TOL = 1e-7
LAYER_GRAD_TOL = 1e-4
COMPOSITE_GRAD_TOL = 1e-5
LOSS_GRAD_TOL = 1e-5
MODEL_GRAD_TOL = 1e-3
INVARIANCE_TOL = 1e-4
STREAM_TOL = 1e-5
GEM_TOL = 1e-6

TOY_SENSOR = SensorModel(width=12, height=8, f_up=math.radians(20.0), f_down=math.radians(10.0), max_range=50.0)
YAW_ROAD_RADIUS = 20.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


def toy_config(**overrides) -> ModelConfig:
    """Smallest network that still has every layer type."""
    values = dict(c=4, heads_sst=2, heads_mst=2, ffn_mult=1, vlad_clusters=4, seq_len_m=4, leg_channels=(2,))
    values.update(overrides)
    return ModelConfig(**values)


def toy_model(seed: int = 0, dtype=np.float32, **overrides) -> SeqOT:
    model = SeqOT(toy_config(**overrides), TOY_SENSOR, seed=seed)
    return model.astype(dtype) if dtype != np.float32 else model


def random_image(rng: np.random.Generator, sensor: SensorModel = TOY_SENSOR, invalid: float = 0.1) -> RangeImage:
    grid = rng.uniform(1.0, sensor.max_range, size=(sensor.height, sensor.width)).astype(np.float32)
    mask = rng.random(grid.shape) >= invalid
    grid[~mask] = INVALID_RANGE
    return RangeImage(grid=grid, mask=mask)


def pixel_centred_cloud(rng: np.random.Generator, sensor: SensorModel, n: int, jitter: float = 0.4) -> PointCloud:
    """Points whose azimuth and elevation stay within ``jitter`` pixels of a pixel centre."""
    u = rng.integers(0, sensor.width, size=n)
    v = rng.integers(0, sensor.height, size=n)
    az = math.pi * (1.0 - 2.0 * (u + 0.5 + rng.uniform(-jitter, jitter, n)) / sensor.width)
    el = (1.0 - (v + 0.5 + rng.uniform(-jitter, jitter, n)) / sensor.height) * sensor.fov - sensor.f_up
    r = rng.uniform(2.0, sensor.max_range - 1.0, size=n)
    points = np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], axis=1)
    return PointCloud(points)


def brute_force_overlap(a: RangeImage, b: RangeImage, delta: float) -> float:
    """Pixel-by-pixel count, independent of ``overlap``."""
    h, w = a.shape
    agree = 0
    for v in range(h):
        for u in range(w):
            if a.mask[v, u] and b.mask[v, u] and abs(float(a.grid[v, u]) - float(b.grid[v, u])) <= delta:
                agree += 1
    denominator = min(int(a.mask.sum()), int(b.mask.sum()))
    return agree / denominator if denominator else 0.0


# ----------------------------------------------------------------------------
# Checks
# ----------------------------------------------------------------------------

def check_projection_shift(seed: int = 0, clouds: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    sensor = SensorModel(width=36, height=8, f_up=math.radians(20.0), f_down=math.radians(10.0), max_range=50.0)
    mismatches = 0
    worst = 0.0
    for _ in range(clouds):
        cloud = pixel_centred_cloud(rng, sensor, 200)
        k = int(rng.integers(0, sensor.width))
        rotated = project(yaw_rotate(cloud, k * sensor.azimuth_step), sensor)
        shifted = column_shift(project(cloud, sensor), k)
        if not np.array_equal(rotated.mask, shifted.mask):
            mismatches += 1
            continue
        worst = max(worst, float(np.max(np.abs(rotated.grid - shifted.grid))))
    return CheckResult('projection_shift_commutation', mismatches == 0 and worst <= 1e-4, worst, 1e-4,
                       f"{mismatches} cell mismatches")


def check_overlap_oracle(seed: int = 0, pairs: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        a = random_image(rng, invalid=0.3)
        b = random_image(rng, invalid=0.3)
        # make roughly half the common cells agree within delta
        close = rng.random(a.shape) < 0.5
        b.grid[close & b.mask] = a.grid[close & b.mask] + rng.uniform(-0.9, 0.9)
        b.mask &= b.grid > 0
        b.grid[~b.mask] = INVALID_RANGE
        worst = max(worst, abs(overlap(a, b, 1.0) - brute_force_overlap(a, b, 1.0)))
    return CheckResult('overlap_oracle', worst == 0.0, worst, 0.0)


def _t(rng: np.random.Generator, *shape, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, dtype=np.float64)


def primitive_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """Name to ``(op, inputs, tolerance)`` for every differentiable kernel."""
    weight = _t(rng, 3, 2, 3, 3)
    bias = _t(rng, 3)
    cases = {
        'add_mul_broadcast': (lambda a, b: a * b + b, [_t(rng, 3, 4), _t(rng, 1, 4)]),
        'sub_div': (lambda a, b: (a - b) / b, [_t(rng, 3, 4), _t(rng, 3, 4, low=0.5, high=2.0)]),
        'pow': (lambda a: a ** 3.0, [_t(rng, 5)]),
        'matmul': (lambda a, b: a @ b, [_t(rng, 3, 4), _t(rng, 4, 2)]),
        'exp_log': (lambda a: a.exp() + a.log(), [_t(rng, 6, low=0.5, high=2.0)]),
        'softplus': (lambda a: a.softplus(), [_t(rng, 6)]),
        'sum_mean': (lambda a: a.sum(axis=0) * a.mean(axis=1).sum(), [_t(rng, 3, 4)]),
        'reshape_transpose': (lambda a: (a.reshape(4, 3) @ a).T, [_t(rng, 3, 4)]),
        'getitem': (lambda a: a[1:3] * a[0:2], [_t(rng, 4, 3)]),
        'concat_stack': (lambda a, b: stack([concat([a, b], axis=1), concat([b, a], axis=1)]), [_t(rng, 2, 3), _t(rng, 2, 3)]),
        'softmax': (lambda a: softmax(a, axis=0), [_t(rng, 4, 5)]),
        'layer_norm': (lambda a: layer_norm(a, axis=0), [_t(rng, 4, 5)]),
        'l2_normalize': (lambda a: l2_normalize(a, axis=0), [_t(rng, 6)]),
        'conv2d_circular': (lambda x, w_, b: conv2d(x, w_, b, (2, 1)), [_t(rng, 2, 7, 5), weight, bias]),
        'gem_pool': (lambda s: gem_pool(s, 3.0), [_t(rng, 4, 6, low=0.1, high=1.0)]),
    }
    cases = {name: (op, inputs, GRAD_TOL) for name, (op, inputs) in cases.items()}
    cases['softmax_product'] = (
        lambda a, b: (softmax(a.T @ b, axis=1) @ b.T).sum(axis=0), [_t(rng, 4, 5), _t(rng, 4, 3)], COMPOSITE_GRAD_TOL)
    return cases


def layer_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """Name to ``(op, inputs, tolerance)`` for each layer, checked against its input and parameters."""
    attention = AttentionConfig(d=8, heads=2)
    layers = {
        'linear': (Linear(8, 5, rng), LINEAR_GRAD_TOL),
        'mhsa': (MultiHeadSelfAttention(attention, rng), LAYER_GRAD_TOL),
        'feed_forward': (FeedForward(8, 16, rng), LAYER_GRAD_TOL),
        'transformer_block': (TransformerBlock(attention, 2, rng), LAYER_GRAD_TOL),
    }
    cases = {}
    for name, (layer, tol) in layers.items():
        layer.astype(np.float64)
        cases[name] = (lambda x, *_, layer=layer: layer(x), [_t(rng, 8, 6)] + layer.parameters(), tol)
    return cases


def check_primitive_gradients(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (op, inputs, tol) in {**primitive_cases(rng), **layer_cases(rng)}.items():
        err = grad_check(op, inputs, eps=1e-6, seed=seed)
        results.append(CheckResult(f'grad_{name}', err < tol, err, tol))
    return results


def check_loss_gradients(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, loss in (('triplet_loss_sub', triplet_loss_sub), ('triplet_loss_global', triplet_loss_global)):
        query, positives, negatives = _t(rng, 8), _t(rng, 3, 8), _t(rng, 4, 8)
        # a margin this large keeps every hinge active, away from its kink
        err = grad_check(lambda q, p, n: loss(q, p, n, 100.0), [query, positives, negatives], eps=1e-5, seed=seed)
        results.append(CheckResult(f'grad_{name}', err < LOSS_GRAD_TOL, err, LOSS_GRAD_TOL))
    return results


def check_model_gradient(seed: int = 0, max_checks: int = 24) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = toy_model(seed, dtype=np.float64)
    images = [random_image(rng) for _ in range(model.seq_len)]
    err = grad_check(lambda *_: model.seqot_forward(images), model.parameters(), eps=1e-6,
                     max_checks=max_checks, seed=seed)
    return CheckResult('grad_full_model', err < MODEL_GRAD_TOL, err, MODEL_GRAD_TOL)


def synthetic_scans(rng: np.random.Generator, world: SyntheticWorld, count: int,
                    sensor: SensorModel = TOY_SENSOR) -> List[PointCloud]:
    """Consecutive simulated scans driving counter-clockwise along the road of ``world``."""
    start = rng.uniform(0.0, 2.0 * math.pi)
    clouds = []
    for k in range(count):
        angle = start + k * SCAN_SPACING / YAW_ROAD_RADIUS
        pose = Pose.from_yaw(angle + math.pi / 2.0, YAW_ROAD_RADIUS * math.cos(angle),
                             YAW_ROAD_RADIUS * math.sin(angle), SENSOR_HEIGHT)
        clouds.append(simulate_scan(world, pose, sensor))
    return clouds


def check_yaw_invariance(seed: int = 0, sequences: int = 20) -> CheckResult:
    """Rotate simulated clouds by whole azimuth steps, project, then describe."""
    rng = np.random.default_rng(seed)
    model = toy_model(seed)
    world = generate_world(seed, extent=40.0, obstacle_count=60, road_radius=YAW_ROAD_RADIUS)
    worst = 0.0
    for _ in range(sequences):
        clouds = synthetic_scans(rng, world, model.seq_len)
        images = [project(c, TOY_SENSOR) for c in clouds]
        steps = rng.integers(1, TOY_SENSOR.width, size=len(clouds))
        rotated = [project(yaw_rotate(c, int(k) * TOY_SENSOR.azimuth_step), TOY_SENSOR) for c, k in zip(clouds, steps)]
        diff = np.max(np.abs(model.describe(images) - model.describe(rotated)))
        worst = max(worst, float(diff))
    return CheckResult('yaw_invariance', worst <= INVARIANCE_TOL, worst, INVARIANCE_TOL)


def check_gem_permutation(seed: int = 0, permutations: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    rows = rng.uniform(0.0, 1.0, size=(18, 32)).astype(np.float32)
    reference = gem_pool(rows, 3.0).data
    worst = 0.0
    for _ in range(permutations):
        pooled = gem_pool(rows[rng.permutation(len(rows))], 3.0).data
        worst = max(worst, float(np.max(np.abs(pooled - reference))))
    return CheckResult('gem_permutation_invariance', worst <= GEM_TOL, worst, GEM_TOL)


def check_stream_batch(seed: int = 0, scans: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = toy_model(seed)
    images = [random_image(rng) for _ in range(scans)]
    m = model.seq_len
    state = model.new_stream()
    worst = 0.0
    for k, image in enumerate(images):
        state, streamed = model.stream_update(state, image, k)
        if k >= m - 1:
            batch = model.describe(images[k - m + 1:k + 1])
            worst = max(worst, float(np.max(np.abs(streamed - batch))))
    return CheckResult('stream_batch_equality', worst <= STREAM_TOL, worst, STREAM_TOL)


def check_segment_equivariance(seed: int = 0, trials: int = 10) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = toy_model(seed)
    d, w = 2 * model.cfg.c, TOY_SENSOR.width
    worst = 0.0
    for _ in range(trials):
        segments = [rng.standard_normal((d, w)).astype(np.float32) for _ in range(3)]
        shifts = [int(s) for s in rng.integers(0, w, size=3)]
        original = model.msm.transformer(concat([Tensor(s) for s in segments], axis=1)).data
        moved = model.msm.transformer(
            concat([Tensor(np.roll(s, -k, axis=1)) for s, k in zip(segments, shifts)], axis=1)).data
        expected = np.concatenate(
            [np.roll(original[:, i * w:(i + 1) * w], -k, axis=1) for i, k in enumerate(shifts)], axis=1)
        worst = max(worst, float(np.max(np.abs(moved - expected))))
    return CheckResult('segment_equivariance', worst <= STREAM_TOL, worst, STREAM_TOL)


def check_conv_guard() -> CheckResult:
    try:
        check_conv_config(3, (1, 1), 'none')
    except EquivarianceError:
        return CheckResult('conv_equivariance_guard', True, 0.0, 0.0)
    return CheckResult('conv_equivariance_guard', False, 1.0, 0.0, "zero-padded 3-wide kernel was accepted")


CHECKS: List[Callable[[], object]] = [
    check_projection_shift,
    check_overlap_oracle,
    check_primitive_gradients,
    check_loss_gradients,
    check_model_gradient,
    check_yaw_invariance,
    check_gem_permutation,
    check_stream_batch,
    check_segment_equivariance,
    check_conv_guard,
]


def run_selftest(progress_callback: Optional[Callable[[ProgressUpdate], None]] = None) -> List[dict]:
    """Run every check and return one result dict per check."""
    results: List[CheckResult] = []
    for k, check in enumerate(CHECKS):
        outcome = check()
        batch = outcome if isinstance(outcome, list) else [outcome]
        results.extend(batch)
        for r in batch:
            log = logger.info if r.passed else logger.error
            log("%s: %s (%.3e, tolerance %.1e)", r.name, "ok" if r.passed else "FAILED", r.value, r.tolerance)
        if progress_callback:
            progress_callback(ProgressUpdate("Selftest", k + 1, len(CHECKS), check.__name__))
    return [asdict(r) for r in results]
