"""Run configuration blocks, JSON loading and presets.

A run configuration is one JSON document with the blocks ``sensor``, ``model``,
``train``, ``data``, ``eval`` and ``overlap``. Unknown keys are rejected and
every default is materialised when the configuration is written back out, so
the run manifest fully describes a run.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from .exceptions import ConfigError
from .models import SensorModel, WINDOW

# Length of sub-descriptors and global descriptors
DESCRIPTOR_DIM = 256

# Published learnable parameter count of the full-size network
REFERENCE_PARAM_COUNT = 12_820_000


@dataclass
class ModelConfig:
    """Network sizes. Keys match the ``model`` block of the run config."""
    c: int = 64
    heads_sst: int = 4
    heads_mst: int = 4
    ffn_mult: int = 2
    vlad_clusters: int = 64
    gem_p_init: float = 3.0
    seq_len_m: int = 20
    leg_channels: Tuple[int, ...] = (16, 32, 64)
    leg_kernel_heights: Optional[Tuple[int, ...]] = None  # planned from the image height when None
    leg_strides: Optional[Tuple[int, ...]] = None
    sst: str = 'transformer'  # 'transformer' or 'conv'
    mst: str = 'transformer'

    @classmethod
    def full(cls) -> 'ModelConfig':
        """Sizes in the range of the published network, for parameter reporting."""
        return cls(c=256, heads_sst=4, heads_mst=4, ffn_mult=4, vlad_clusters=64, seq_len_m=20,
                   leg_channels=(16, 32, 64, 128))

    def validate(self) -> 'ModelConfig':
        if self.c < 1:
            raise ConfigError(f"model.c must be positive, got {self.c}")
        if self.seq_len_m < WINDOW:
            raise ConfigError(f"model.seq_len_m must be at least {WINDOW}, got {self.seq_len_m}")
        for name, heads, dim in (('heads_sst', self.heads_sst, self.c),
                                 ('heads_mst', self.heads_mst, 2 * self.c)):
            if heads < 1 or dim % heads != 0:
                raise ConfigError(f"model.{name}={heads} does not divide model dim {dim}")
        if self.ffn_mult < 1:
            raise ConfigError(f"model.ffn_mult must be at least 1, got {self.ffn_mult}")
        if self.vlad_clusters < 1:
            raise ConfigError(f"model.vlad_clusters must be at least 1, got {self.vlad_clusters}")
        if self.gem_p_init < 1:
            raise ConfigError(f"model.gem_p_init must be at least 1, got {self.gem_p_init}")
        for name in ('sst', 'mst'):
            if getattr(self, name) not in ('transformer', 'conv'):
                raise ConfigError(f"model.{name} must be 'transformer' or 'conv'")
        if (self.leg_kernel_heights is None) != (self.leg_strides is None):
            raise ConfigError("model.leg_kernel_heights and model.leg_strides must be given together")
        return self

    def leg_layout(self, height: int) -> List[Tuple[int, int, int, int]]:
        """(in_channels, out_channels, kernel_height, stride) per OverlapNetLeg layer.

        The layout must bring ``height`` down to exactly 1.
        """
        if self.leg_kernel_heights is not None:
            kernels, strides = list(self.leg_kernel_heights), list(self.leg_strides)
            if len(kernels) != len(strides) or not kernels:
                raise ConfigError("model.leg_kernel_heights and model.leg_strides must have equal, non-zero length")
        else:
            kernels, strides = plan_leg(height)

        h = height
        for k, s in zip(kernels, strides):
            if k < 1 or s < 1 or k > h:
                raise ConfigError(f"leg kernel height {k} does not fit feature height {h}")
            h = (h - k) // s + 1
        if h != 1:
            raise ConfigError(f"leg reduces height {height} to {h}, expected 1")

        hidden = list(self.leg_channels[:len(kernels) - 1])
        hidden += [self.leg_channels[-1] if self.leg_channels else self.c] * (len(kernels) - 1 - len(hidden))
        channels = [1] + hidden + [self.c]
        return [(channels[i], channels[i + 1], kernels[i], strides[i]) for i in range(len(kernels))]


def plan_leg(height: int) -> Tuple[List[int], List[int]]:
    """Kernel heights and strides that reduce ``height`` to 1.

    Height 32 gives kernels (5, 3, 3, 2) with stride 2.
    """
    kernels, strides = [], []
    h = height
    while h > 1 or not kernels:
        if h >= 12 and not kernels:
            k = 5
        elif h >= 6:
            k = 3
        else:
            k = h
        kernels.append(k)
        strides.append(2)
        h = (h - k) // 2 + 1
    return kernels, strides


@dataclass
class TrainConfig:
    """Two-phase training hyperparameters. Defaults follow the published setup."""
    margin: float = 0.5
    n_pos: int = 6
    n_neg: int = 6
    epochs: int = 20
    epochs_phase2: int = 20
    lr_phase1: float = 5e-6
    lr_phase2: float = 5e-5
    decay_factor: float = 0.9
    decay_every: int = 5  # epochs
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 0
    queries_per_epoch: Optional[int] = None
    vlad_init_windows: int = 64  # windows sampled to place NetVLAD centroids, 0 keeps them random

    def validate(self) -> 'TrainConfig':
        if not self.margin > 0:
            raise ConfigError(f"train.margin must be positive, got {self.margin}")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ConfigError("train.n_pos and train.n_neg must be at least 1")
        if self.epochs < 0 or self.epochs_phase2 < 0:
            raise ConfigError("train epochs must not be negative")
        if self.decay_every < 1:
            raise ConfigError("train.decay_every must be at least 1")
        if self.queries_per_epoch is not None and self.queries_per_epoch < 1:
            raise ConfigError("train.queries_per_epoch must be at least 1")
        if self.vlad_init_windows < 0:
            raise ConfigError(f"train.vlad_init_windows must not be negative, got {self.vlad_init_windows}")
        return self

    def lr_at(self, base_lr: float, epoch: int) -> float:
        return base_lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class DataConfig:
    """Where scans come from: a manifest file or the synthetic generator."""
    manifest: Optional[str] = None
    synthetic_seed: int = 0
    scans: int = 600
    obstacle_count: int = 160
    extent: float = 120.0
    noise_sigma: float = 0.02


@dataclass
class EvalConfig:
    k_values: Tuple[int, ...] = (1, 5, 20)
    query_stride: int = 1
    pr_thresholds: int = 100
    yaw_angles_deg: Tuple[float, ...] = (0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0)
    seq_lengths: Tuple[int, ...] = (10, 20, 30, 40)

    def validate(self) -> 'EvalConfig':
        if not self.k_values or min(self.k_values) < 1:
            raise ConfigError("eval.k_values must be positive")
        if self.query_stride < 1:
            raise ConfigError("eval.query_stride must be at least 1")
        return self


@dataclass
class OverlapConfig:
    delta: float = 1.0
    threshold: float = 0.3
    gate_radius: Optional[float] = None

    def validate(self) -> 'OverlapConfig':
        if not self.delta > 0:
            raise ConfigError(f"overlap.delta must be positive, got {self.delta}")
        if not 0 <= self.threshold <= 1:
            raise ConfigError(f"overlap.threshold must lie in [0, 1], got {self.threshold}")
        return self


BLOCKS = {
    'sensor': SensorModel,
    'model': ModelConfig,
    'train': TrainConfig,
    'data': DataConfig,
    'eval': EvalConfig,
    'overlap': OverlapConfig,
}


def _block_from_dict(cls, data: dict, block: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config block '{block}' must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in config block '{block}': {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if isinstance(value, list) and (isinstance(default, tuple) or default is None):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class RunConfig:
    """Complete configuration of one run."""
    sensor: SensorModel = field(default_factory=SensorModel)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    overlap: OverlapConfig = field(default_factory=OverlapConfig)

    @classmethod
    def desk(cls) -> 'RunConfig':
        """Small configuration that trains on a desktop CPU."""
        return cls(
            sensor=SensorModel(width=180, height=16, f_up=math.radians(20.0),
                               f_down=math.radians(10.0), max_range=50.0),
            model=ModelConfig(c=32, vlad_clusters=32, seq_len_m=20, leg_channels=(8, 16)),
            train=TrainConfig(epochs=10, epochs_phase2=10, lr_phase1=1e-3, lr_phase2=1e-2,
                              queries_per_epoch=40),
        )

    @classmethod
    def from_dict(cls, data: dict) -> 'RunConfig':
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(data) - set(BLOCKS))
        if unknown:
            raise ConfigError(f"unknown config block(s): {', '.join(unknown)}")
        blocks = {name: _block_from_dict(block_cls, data.get(name, {}), name)
                  for name, block_cls in BLOCKS.items()}
        return cls(**blocks).validate()

    @classmethod
    def load(cls, path: Path) -> 'RunConfig':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in config file {path}: {e}") from None
        return cls.from_dict(data)

    def validate(self) -> 'RunConfig':
        self.sensor.validate()
        self.model.validate()
        self.model.leg_layout(self.sensor.height)
        self.train.validate()
        self.eval.validate()
        self.overlap.validate()
        return self

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in BLOCKS}

    def save(self, path: Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding='utf-8')

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
