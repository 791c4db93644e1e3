"""Scan ingestion and the synthetic LiDAR benchmark.

Clouds use the KITTI velodyne layout (little-endian float32 x, y, z,
intensity per point) and poses the KITTI odometry layout (12 row-major values
of the 3x4 world-from-sensor block per line).

The synthetic world is a flat ground plane with box and cylinder obstacles
around a circular road. Scans are ray cast through pixel centers, so every
simulated point projects back into the pixel whose ray produced it.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DataError
from .models import (
    Box,
    Cylinder,
    DatasetManifest,
    PointCloud,
    Pose,
    RangeImage,
    ScanEntry,
    SensorModel,
    SyntheticWorld,
)
from .rangeproj import project, yaw_rotate

logger = logging.getLogger(__name__)

RECORD_BYTES = 16
SENSOR_HEIGHT = 1.7  # meters above ground
SCAN_SPACING = 0.5  # meters between consecutive scans of a pass
ROAD_WIDTH = 8.0
RAY_CHUNK = 4096

MANIFEST_NAME = 'manifest.json'
POSES_NAME = 'poses.txt'


# ----------------------------------------------------------------------------
# KITTI-style files
# ----------------------------------------------------------------------------

def load_cloud(path: Path) -> PointCloud:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"cloud file not found: {path}") from None
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if not data:
        raise DataError(f"{path}: empty cloud file")
    if len(data) % RECORD_BYTES:
        offset = len(data) - len(data) % RECORD_BYTES
        raise DataError(f"{path}: incomplete point record at byte offset {offset} "
                        f"(file size {len(data)} is not a multiple of {RECORD_BYTES})")
    records = np.frombuffer(data, dtype='<f4').reshape(-1, 4)
    return PointCloud(records[:, :3].astype(np.float32), records[:, 3].astype(np.float32))


def write_cloud(path: Path, cloud: PointCloud):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    intensity = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    records = np.empty((len(cloud), 4), dtype='<f4')
    records[:, :3] = cloud.points
    records[:, 3] = intensity
    path.write_bytes(records.tobytes())


def load_poses(path: Path) -> List[Pose]:
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except FileNotFoundError:
        raise DataError(f"pose file not found: {path}") from None
    poses = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise DataError(f"{path}, line {line_no}: expected 12 values, got {len(tokens)}")
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise DataError(f"{path}, line {line_no}: non-numeric pose value") from None
        poses.append(Pose.from_row(values))
    return poses


def write_poses(path: Path, poses: Sequence[Pose]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(repr(v) for v in pose.to_row()) for pose in poses]
    path.write_text("\n".join(lines) + "\n", encoding='utf-8')


# ----------------------------------------------------------------------------
# Synthetic world
# ----------------------------------------------------------------------------

def default_road_radius(scans_per_pass: int) -> float:
    """Loop radius that spaces one pass of scans ``SCAN_SPACING`` apart."""
    return scans_per_pass * SCAN_SPACING / (2.0 * math.pi)


def generate_world(
    seed: int,
    extent: float,
    obstacle_count: int,
    road_radius: float = 24.0,
    road_width: float = ROAD_WIDTH,
) -> SyntheticWorld:
    """Place obstacles in the square [-extent, extent]^2, keeping the road clear.

    Three quarters of the obstacles line the road, the rest are spread over
    the whole square.
    """
    if not extent > 0:
        raise DataError(f"world extent must be positive, got {extent}")
    rng = np.random.default_rng(seed)
    world = SyntheticWorld(seed=seed, extent=extent)
    near_road = (3 * obstacle_count) // 4
    clearance = road_width / 2.0

    placed = 0
    while placed < obstacle_count:
        if placed < near_road:
            angle = rng.uniform(0.0, 2.0 * math.pi)
            side = rng.choice([-1.0, 1.0])
            r = road_radius + side * rng.uniform(clearance + 1.0, clearance + 25.0)
            x, y = r * math.cos(angle), r * math.sin(angle)
        else:
            x, y = rng.uniform(-extent, extent, size=2)
        is_box = rng.random() < 0.6
        if is_box:
            sx, sy = rng.uniform(2.0, 8.0, size=2)
            height = rng.uniform(2.0, 12.0)
            footprint = 0.5 * math.hypot(sx, sy)
        else:
            radius = rng.uniform(0.3, 1.5)
            height = rng.uniform(3.0, 10.0)
            footprint = radius
        if abs(math.hypot(x, y) - road_radius) < clearance + footprint:
            continue
        if abs(x) > extent or abs(y) > extent:
            continue
        if is_box:
            world.boxes.append(Box(center=(float(x), float(y), height / 2.0), size=(float(sx), float(sy), height)))
        else:
            world.cylinders.append(Cylinder(center=(float(x), float(y)), radius=float(radius), height=float(height)))
        placed += 1
    logger.debug("generated world seed=%d: %d boxes, %d cylinders",
                 seed, len(world.boxes), len(world.cylinders))
    return world


def pixel_ray_directions(sensor: SensorModel) -> np.ndarray:
    """(h * w, 3) unit directions through pixel centers, row-major, sensor frame."""
    u = np.arange(sensor.width) + 0.5
    v = np.arange(sensor.height) + 0.5
    azimuth = math.pi * (1.0 - 2.0 * u / sensor.width)
    elevation = (1.0 - v / sensor.height) * sensor.fov - sensor.f_up
    el, az = np.meshgrid(elevation, azimuth, indexing='ij')
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


def _hit_ground(origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    t = np.full(dirs.shape[0], np.inf)
    down = dirs[:, 2] < 0
    t[down] = -origin[2] / dirs[down, 2]
    return t


def _hit_boxes(origin: np.ndarray, dirs: np.ndarray, boxes: List[Box]) -> np.ndarray:
    if not boxes:
        return np.full(dirs.shape[0], np.inf)
    centers = np.array([b.center for b in boxes])
    half = np.array([b.size for b in boxes]) / 2.0
    lo, hi = centers - half, centers + half  # (B, 3)
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe[:, None, :]  # (R, 1, 3)
    t1 = (lo[None] - origin) * inv
    t2 = (hi[None] - origin) * inv
    t_near = np.minimum(t1, t2).max(axis=2)  # (R, B)
    t_far = np.maximum(t1, t2).min(axis=2)
    hit = (t_far >= t_near) & (t_near > 0)
    return np.where(hit, t_near, np.inf).min(axis=1)


def _hit_cylinders(origin: np.ndarray, dirs: np.ndarray, cylinders: List[Cylinder]) -> np.ndarray:
    if not cylinders:
        return np.full(dirs.shape[0], np.inf)
    centers = np.array([c.center for c in cylinders])  # (C, 2)
    radii = np.array([c.radius for c in cylinders])
    heights = np.array([c.height for c in cylinders])

    oc = origin[None, :2] - centers  # (C, 2)
    dxy = dirs[:, :2]  # (R, 2)
    a = np.sum(dxy * dxy, axis=1)[:, None]  # (R, 1)
    b = 2.0 * dxy @ oc.T  # (R, C)
    c = np.sum(oc * oc, axis=1)[None, :] - radii[None, :] ** 2
    disc = b * b - 4.0 * a * c
    with np.errstate(invalid='ignore', divide='ignore'):
        t_side = (-b - np.sqrt(disc)) / (2.0 * a)
    z_side = origin[2] + t_side * dirs[:, 2:3]
    side_hit = (disc >= 0) & (a > 0) & (t_side > 0) & (z_side >= 0) & (z_side <= heights[None, :])
    t = np.where(side_hit, t_side, np.inf)

    # top cap, seen from above
    with np.errstate(invalid='ignore', divide='ignore'):
        t_cap = (heights[None, :] - origin[2]) / dirs[:, 2:3]
    cap_x = origin[0] + t_cap * dirs[:, 0:1] - centers[None, :, 0]
    cap_y = origin[1] + t_cap * dirs[:, 1:2] - centers[None, :, 1]
    cap_hit = (dirs[:, 2:3] < 0) & (t_cap > 0) & (cap_x ** 2 + cap_y ** 2 <= radii[None, :] ** 2)
    t = np.minimum(t, np.where(cap_hit, t_cap, np.inf))
    return t.min(axis=1)


def cast_rays(world: SyntheticWorld, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance along each unit ray to the nearest surface, inf on a miss."""
    t = np.empty(dirs.shape[0])
    for start in range(0, dirs.shape[0], RAY_CHUNK):
        chunk = dirs[start:start + RAY_CHUNK]
        t[start:start + RAY_CHUNK] = np.minimum.reduce([
            _hit_ground(origin, chunk),
            _hit_boxes(origin, chunk, world.boxes),
            _hit_cylinders(origin, chunk, world.cylinders),
        ])
    return t


def simulate_scan(
    world: SyntheticWorld,
    pose: Pose,
    sensor: SensorModel,
    noise_sigma: float = 0.0,
    seed=0,
) -> PointCloud:
    """Ray cast one scan from ``pose``; points are returned in the sensor frame."""
    sensor.validate()
    pose.validate()
    local_dirs = pixel_ray_directions(sensor)
    world_dirs = local_dirs @ pose.rotation.T
    t = cast_rays(world, pose.translation, world_dirs)
    hit = t <= sensor.max_range
    ranges = t[hit]
    if noise_sigma > 0:
        ranges = ranges + np.random.default_rng(seed).normal(0.0, noise_sigma, size=ranges.shape)
    points = local_dirs[hit] * ranges[:, None]
    return PointCloud(points.astype(np.float32))


# ----------------------------------------------------------------------------
# Benchmark
# ----------------------------------------------------------------------------

def make_benchmark(
    seed: int,
    scans: int = 600,
    sensor: Optional[SensorModel] = None,
    extent: float = 120.0,
    obstacle_count: int = 160,
    noise_sigma: float = 0.02,
) -> DatasetManifest:
    """Two passes around one loop: a database pass and a perturbed query pass.

    The last quarter of the query pass drives the loop backwards, so those
    scans look at the database places from the opposite heading.
    """
    sensor = sensor or SensorModel()
    rng = np.random.default_rng([seed, 1])
    n_db = scans // 2
    n_query = scans - n_db
    radius = default_road_radius(n_db)
    reversed_start = (3 * n_query) // 4

    def loop_pose(position: float, heading_offset: float = 0.0, lateral: float = 0.0) -> Pose:
        angle = 2.0 * math.pi * position / n_db
        r = radius + lateral
        # counter-clockwise travel faces along the tangent
        return Pose.from_yaw(angle + math.pi / 2.0 + heading_offset,
                             r * math.cos(angle), r * math.sin(angle), SENSOR_HEIGHT)

    entries = [ScanEntry(index=k, pose=loop_pose(k), split='database') for k in range(n_db)]
    for k in range(n_query):
        lateral = float(rng.normal(0.0, 0.3))
        yaw_jitter = float(rng.normal(0.0, math.radians(3.0)))
        reverse = k >= reversed_start
        position = (reversed_start + n_query - 1 - k) if reverse else k
        position *= n_db / n_query
        pose = loop_pose(position, yaw_jitter + (math.pi if reverse else 0.0), lateral)
        entries.append(ScanEntry(index=n_db + k, pose=pose, split='query', reversed_segment=reverse))

    manifest = DatasetManifest(scans=entries, sensor=sensor, world_seed=seed, world_extent=extent,
                               obstacle_count=obstacle_count, noise_sigma=noise_sigma, road_radius=radius)
    logger.info("benchmark seed=%d: %d database and %d query scans, %d reversed",
                seed, n_db, n_query, n_query - reversed_start)
    return manifest


def world_for(manifest: DatasetManifest) -> SyntheticWorld:
    if not manifest.is_synthetic:
        raise DataError("manifest does not describe a synthetic world")
    return generate_world(manifest.world_seed, manifest.world_extent, manifest.obstacle_count,
                          road_radius=manifest.road_radius)


# ----------------------------------------------------------------------------
# Manifest files
# ----------------------------------------------------------------------------

def write_manifest(directory: Path, manifest: DatasetManifest) -> Path:
    """Write ``manifest.json`` and ``poses.txt`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_poses(directory / POSES_NAME, manifest.poses())
    sensor = manifest.sensor
    document = {
        'sensor': {'width': sensor.width, 'height': sensor.height, 'f_up': sensor.f_up,
                   'f_down': sensor.f_down, 'max_range': sensor.max_range},
        'pose_file': POSES_NAME,
        'scans': [
            {
                'index': s.index,
                'split': s.split,
                'cloud': str(s.cloud_path) if s.cloud_path is not None else None,
                'reversed_segment': s.reversed_segment,
            }
            for s in manifest.scans
        ],
    }
    if manifest.is_synthetic:
        document['world'] = {
            'seed': manifest.world_seed,
            'extent': manifest.world_extent,
            'obstacle_count': manifest.obstacle_count,
            'noise_sigma': manifest.noise_sigma,
            'road_radius': manifest.road_radius,
        }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(document, indent=2), encoding='utf-8')
    return path


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"invalid manifest {path}: {e}") from None

    try:
        sensor = SensorModel(**document['sensor'])
        poses = load_poses(path.parent / document.get('pose_file', POSES_NAME))
        rows = document['scans']
    except (KeyError, TypeError) as e:
        raise DataError(f"manifest {path} is missing {e}") from None
    if len(poses) != len(rows):
        raise DataError(f"manifest {path} lists {len(rows)} scans but the pose file has {len(poses)} poses")

    scans = []
    for row, pose in zip(rows, poses):
        cloud = row.get('cloud')
        if cloud is not None and not Path(cloud).is_absolute():
            cloud = path.parent / cloud
        scans.append(ScanEntry(index=int(row['index']), pose=pose, split=row.get('split', 'database'),
                               cloud_path=Path(cloud) if cloud is not None else None,
                               reversed_segment=bool(row.get('reversed_segment', False))))
    world = document.get('world') or {}
    return DatasetManifest(
        scans=scans, sensor=sensor,
        world_seed=world.get('seed'), world_extent=float(world.get('extent', 0.0)),
        obstacle_count=int(world.get('obstacle_count', 0)), noise_sigma=float(world.get('noise_sigma', 0.0)),
        road_radius=float(world.get('road_radius', 0.0)),
    )


class ScanLoader:
    """Clouds and range images of a manifest by scan index, cached once projected.

    Synthetic scans are simulated on first access with noise seeded by the
    world seed and the scan index.
    """

    def __init__(self, manifest: DatasetManifest, sensor: Optional[SensorModel] = None):
        self.manifest = manifest
        self.sensor = sensor or manifest.sensor
        self._entries: Dict[int, ScanEntry] = {s.index: s for s in manifest.scans}
        self._world: Optional[SyntheticWorld] = None
        self._images: Dict[int, RangeImage] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, index: int) -> bool:
        return int(index) in self._entries

    def entry(self, index: int) -> ScanEntry:
        try:
            return self._entries[int(index)]
        except KeyError:
            raise DataError(f"scan {index} is not in the manifest") from None

    @property
    def world(self) -> SyntheticWorld:
        if self._world is None:
            self._world = world_for(self.manifest)
        return self._world

    def cloud(self, index: int) -> PointCloud:
        entry = self.entry(index)
        if entry.cloud_path is not None:
            return load_cloud(entry.cloud_path)
        return simulate_scan(self.world, entry.pose, self.sensor, self.manifest.noise_sigma,
                             seed=[int(self.manifest.world_seed), int(index)])

    def image(self, index: int) -> RangeImage:
        index = int(index)
        if index not in self._images:
            self._images[index] = project(self.cloud(index), self.sensor)
        return self._images[index]

    def __getitem__(self, index: int) -> RangeImage:
        return self.image(index)

    def rotated_image(self, index: int, yaw: float) -> RangeImage:
        """Range image of the scan with the sensor turned by ``yaw`` radians."""
        return project(yaw_rotate(self.cloud(index), -yaw), self.sensor)

    def ids(self, split: Optional[str] = None) -> List[int]:
        return [s.index for s in self.manifest.scans if split is None or s.split == split]

    def pass_ids(self) -> List[List[int]]:
        return [[s.index for s in run] for run in self.manifest.passes()]
