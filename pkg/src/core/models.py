"""Data classes for observations, labels, stream state and results."""

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, DataError

# Range value stored in cells that no point projected to
INVALID_RANGE = -1.0

# Scans grouped into one sub-descriptor window
WINDOW = 3

# (oldest, middle, anchor) scan ids of one window
SampleWindow = Tuple[int, int, int]


@dataclass
class PointCloud:
    """3D points in the sensor frame, meters."""
    points: np.ndarray  # (N, 3)
    intensity: Optional[np.ndarray] = None  # (N,), unused by the pipeline

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"point array must have shape (N, 3), got {self.points.shape}")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class SensorModel:
    """Spherical projection geometry of a spinning LiDAR."""
    width: int = 900
    height: int = 32
    f_up: float = math.radians(25.0)  # elevation offset of the projection: the bottom row looks down by f_up
    f_down: float = math.radians(3.0)  # the top row looks up by f_down
    max_range: float = 80.0

    @property
    def fov(self) -> float:
        return self.f_up + self.f_down

    @property
    def azimuth_step(self) -> float:
        """Yaw angle covered by one image column."""
        return 2.0 * math.pi / self.width

    def validate(self) -> 'SensorModel':
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"invalid image size {self.height}x{self.width}")
        if not self.fov > 0:
            raise ConfigError("invalid field of view")
        if not self.max_range > 0:
            raise ConfigError(f"invalid max range {self.max_range}")
        return self


@dataclass
class RangeImage:
    """h x w range grid with an explicit validity mask."""
    grid: np.ndarray  # (h, w) float32, INVALID_RANGE where mask is False
    mask: np.ndarray  # (h, w) bool

    @classmethod
    def empty(cls, height: int, width: int) -> 'RangeImage':
        return cls(
            grid=np.full((height, width), INVALID_RANGE, dtype=np.float32),
            mask=np.zeros((height, width), dtype=bool),
        )

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> 'RangeImage':
        """Rebuild the mask from sentinel cells (file dumps carry only the grid)."""
        grid = np.asarray(grid, dtype=np.float32)
        return cls(grid=grid, mask=grid > 0)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())

    def equals(self, other: 'RangeImage') -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.mask, other.mask)
                and np.array_equal(self.grid, other.grid))


@dataclass
class Pose:
    """World-from-sensor rigid transform as a 4x4 homogeneous matrix."""
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (4, 4):
            raise DataError(f"pose must be 4x4, got {self.matrix.shape}")

    @classmethod
    def identity(cls) -> 'Pose':
        return cls(np.eye(4))

    @classmethod
    def from_yaw(cls, yaw: float, x: float = 0.0, y: float = 0.0, z: float = 0.0) -> 'Pose':
        c, s = math.cos(yaw), math.sin(yaw)
        m = np.eye(4)
        m[:2, :2] = [[c, -s], [s, c]]
        m[:3, 3] = (x, y, z)
        return cls(m)

    @classmethod
    def from_row(cls, values) -> 'Pose':
        """Build from 12 row-major values of the upper 3x4 block."""
        values = np.asarray(values, dtype=np.float64)
        if values.size != 12:
            raise DataError(f"pose row needs 12 values, got {values.size}")
        m = np.eye(4)
        m[:3, :] = values.reshape(3, 4)
        return cls(m)

    def to_row(self) -> List[float]:
        return [float(v) for v in self.matrix[:3, :].reshape(-1)]

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return (np.all(np.isfinite(self.matrix))
                and np.allclose(r @ r.T, np.eye(3), atol=tol)
                and np.array_equal(self.matrix[3], [0.0, 0.0, 0.0, 1.0]))

    def validate(self) -> 'Pose':
        if not self.is_valid():
            raise DataError("pose is not a rigid transform (non-invertible)")
        return self

    def inverse(self) -> 'Pose':
        r = self.rotation
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ self.translation
        return Pose(m)

    def __matmul__(self, other: 'Pose') -> 'Pose':
        return Pose(self.matrix @ other.matrix)


@dataclass
class OverlapTable:
    """Pairwise overlap between anchor scans, rows are the reference frame."""
    values: np.ndarray  # (n, n) float32 in [0, 1]
    scan_ids: np.ndarray  # (n,) int64
    delta: float
    pos_threshold: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.scan_ids = np.asarray(self.scan_ids, dtype=np.int64)
        n = self.scan_ids.shape[0]
        if self.values.shape != (n, n):
            raise DataError(f"overlap table shape {self.values.shape} does not match {n} scan ids")
        self._index = {int(sid): i for i, sid in enumerate(self.scan_ids)}

    def __len__(self) -> int:
        return self.scan_ids.shape[0]

    def index_of(self, scan_id: int) -> int:
        try:
            return self._index[int(scan_id)]
        except KeyError:
            raise DataError(f"scan id {scan_id} is not in the overlap table") from None

    def value(self, id_a: int, id_b: int) -> float:
        return float(self.values[self.index_of(id_a), self.index_of(id_b)])

    @property
    def threshold32(self) -> np.float32:
        """Threshold compared in the table precision, so reloaded tables label identically."""
        return np.float32(self.pos_threshold)

    def positive_mask(self) -> np.ndarray:
        return self.values > self.threshold32

    def is_positive(self, id_a: int, id_b: int) -> bool:
        return bool(self.values[self.index_of(id_a), self.index_of(id_b)] > self.threshold32)

    def positives(self, scan_id: int) -> List[int]:
        """Scan ids overlapping the given scan above the threshold, itself excluded."""
        row = self.values[self.index_of(scan_id)]
        return [int(s) for s, v in zip(self.scan_ids, row) if v > self.threshold32 and s != scan_id]

    def negatives(self, scan_id: int) -> List[int]:
        """Scan ids at or below the threshold, itself excluded."""
        row = self.values[self.index_of(scan_id)]
        return [int(s) for s, v in zip(self.scan_ids, row) if v <= self.threshold32 and s != scan_id]


@dataclass
class TrainingTuple:
    """One query window with its sampled positive and negative windows."""
    query: SampleWindow
    positives: List[SampleWindow] = field(default_factory=list)
    negatives: List[SampleWindow] = field(default_factory=list)

    @property
    def query_id(self) -> int:
        return self.query[-1]

    @property
    def positive_ids(self) -> List[int]:
        return [w[-1] for w in self.positives]

    @property
    def negative_ids(self) -> List[int]:
        return [w[-1] for w in self.negatives]


def window_for(anchor_id: int) -> SampleWindow:
    """Group an anchor scan with its two preceding scans."""
    return (anchor_id - 2, anchor_id - 1, anchor_id)


@dataclass
class StreamState:
    """Cached single-scan features and sub-descriptors of one incoming stream."""
    seq_len: int
    features: Deque[np.ndarray] = field(default_factory=deque)
    feature_ids: Deque[int] = field(default_factory=deque)
    sub_descriptors: Deque[np.ndarray] = field(default_factory=deque)
    sub_descriptor_ids: Deque[int] = field(default_factory=deque)
    last_id: Optional[int] = None

    def __post_init__(self):
        if self.seq_len < WINDOW:
            raise ConfigError(f"sequence length {self.seq_len} is shorter than the window {WINDOW}")
        self.features = deque(self.features, maxlen=self.seq_len - 1)
        self.feature_ids = deque(self.feature_ids, maxlen=self.seq_len - 1)
        # The newest sub-descriptor is pooled before it is cached
        self.sub_descriptors = deque(self.sub_descriptors, maxlen=self.seq_len - 3)
        self.sub_descriptor_ids = deque(self.sub_descriptor_ids, maxlen=self.seq_len - 3)


@dataclass
class ScanEntry:
    """One scan of a dataset manifest."""
    index: int
    pose: Pose
    split: str  # 'database' or 'query'
    cloud_path: Optional[Path] = None  # None for synthetic scans
    reversed_segment: bool = False


@dataclass
class DatasetManifest:
    """Ordered scans with poses, sensor model and split tags."""
    scans: List[ScanEntry]
    sensor: SensorModel
    world_seed: Optional[int] = None
    world_extent: float = 0.0
    obstacle_count: int = 0
    noise_sigma: float = 0.0
    road_radius: float = 0.0

    def __post_init__(self):
        indices = [s.index for s in self.scans]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise DataError("manifest scan indices must be strictly increasing")

    @property
    def is_synthetic(self) -> bool:
        return self.world_seed is not None

    def split(self, name: str) -> List[ScanEntry]:
        return [s for s in self.scans if s.split == name]

    def poses(self) -> List[Pose]:
        return [s.pose for s in self.scans]

    def passes(self) -> List[List[ScanEntry]]:
        """Contiguous runs of scans sharing a split tag."""
        runs: List[List[ScanEntry]] = []
        for scan in self.scans:
            if runs and runs[-1][-1].split == scan.split and runs[-1][-1].index == scan.index - 1:
                runs[-1].append(scan)
            else:
                runs.append([scan])
        return runs


@dataclass
class Box:
    """Axis-aligned box obstacle, meters."""
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]


@dataclass
class Cylinder:
    """Vertical cylinder standing on the ground, meters."""
    center: Tuple[float, float]
    radius: float
    height: float


@dataclass
class SyntheticWorld:
    """Ground plane at z=0 with primitive obstacles."""
    seed: int
    extent: float
    boxes: List[Box] = field(default_factory=list)
    cylinders: List[Cylinder] = field(default_factory=list)

    @property
    def obstacle_count(self) -> int:
        return len(self.boxes) + len(self.cylinders)


@dataclass
class ProgressUpdate:
    """Progress update sent to the caller of a long-running operation."""
    phase: str  # e.g. "Labelling", "Phase 1", "Describing"
    current: int = 0
    total: int = 0
    message: str = ""


@dataclass
class TrainingResult:
    """Final result of a training phase."""
    success: bool
    phase: int
    epochs_run: int = 0
    steps_run: int = 0
    epoch_losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    error_message: str = ""


@dataclass
class EvalReport:
    """Retrieval metrics of one evaluation run."""
    recall_at: Dict[int, Optional[float]] = field(default_factory=dict)  # n -> AR@n, None if undefined
    excluded_queries: int = 0
    evaluated_queries: int = 0
    pr: List[Tuple[float, float, float]] = field(default_factory=list)  # (threshold, precision, recall)
    f1_max: float = 0.0
    top_k: Dict[int, List[Tuple[int, float]]] = field(default_factory=dict)

    @property
    def ar1(self) -> Optional[float]:
        return self.recall_at.get(1)

    @property
    def ar5(self) -> Optional[float]:
        return self.recall_at.get(5)

    @property
    def ar20(self) -> Optional[float]:
        return self.recall_at.get(20)

    def to_dict(self) -> dict:
        return {
            'ar1': self.ar1,
            'ar5': self.ar5,
            'ar20': self.ar20,
            'excluded_queries': self.excluded_queries,
            'evaluated_queries': self.evaluated_queries,
            'pr': [[t, p, r] for t, p, r in self.pr],
            'f1_max': self.f1_max,
        }
