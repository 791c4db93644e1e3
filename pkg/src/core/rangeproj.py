"""Spherical range-image projection of LiDAR point clouds.

A point (x, y, z) with range r lands in column
``u = floor(0.5 * (1 - atan2(y, x) / pi) * w)`` and row
``v = floor((1 - (asin(z / r) + f_up) / f) * h)``. When several points hit
the same pixel the nearest one is kept. Rotating a cloud about the z-axis by
``k * 2pi / w`` moves every column left by ``k``, which is what
``column_shift`` reproduces on the image.
"""

import math

import numpy as np

from .exceptions import DataError
from .models import PointCloud, Pose, RangeImage, SensorModel

# Points closer than this are dropped before the elevation is computed
MIN_RANGE = 1e-6


def pixel_coordinates(points: np.ndarray, sensor: SensorModel):
    """Column, row and range of each point, before any bounds filtering."""
    points = np.asarray(points, dtype=np.float64)
    ranges = np.linalg.norm(points, axis=1)
    keep = np.isfinite(ranges) & (ranges >= MIN_RANGE)
    points, ranges = points[keep], ranges[keep]

    azimuth = np.arctan2(points[:, 1], points[:, 0])
    elevation = np.arcsin(np.clip(points[:, 2] / ranges, -1.0, 1.0))

    u = np.floor(0.5 * (1.0 - azimuth / math.pi) * sensor.width).astype(np.int64)
    v = np.floor((1.0 - (elevation + sensor.f_up) / sensor.fov) * sensor.height).astype(np.int64)
    # atan2 == -pi lands on column w, which is column 0 of the circular image
    u %= sensor.width
    return u, v, ranges


def project(cloud: PointCloud, sensor: SensorModel) -> RangeImage:
    """Project a point cloud to an h x w range image, nearest point per pixel."""
    sensor.validate()
    if len(cloud) == 0:
        raise DataError("empty point cloud")

    u, v, ranges = pixel_coordinates(cloud.points, sensor)
    inside = (v >= 0) & (v < sensor.height)
    u, v, ranges = u[inside], v[inside], ranges[inside]

    image = RangeImage.empty(sensor.height, sensor.width)
    if ranges.size == 0:
        return image

    flat = v * sensor.width + u
    # Sort by pixel, then by range; the first entry of each pixel is the nearest
    order = np.lexsort((ranges, flat))
    flat_sorted = flat[order]
    first = np.ones(flat_sorted.shape[0], dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]

    image.grid.reshape(-1)[flat[winners]] = ranges[winners].astype(np.float32)
    image.mask.reshape(-1)[flat[winners]] = True
    return image


def yaw_rotate(cloud: PointCloud, theta: float) -> PointCloud:
    """Rotate every point about the sensor z-axis by ``theta`` radians."""
    if theta == 0:
        return PointCloud(cloud.points.copy(), cloud.intensity)
    c, s = math.cos(theta), math.sin(theta)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    points = np.asarray(cloud.points, dtype=np.float64) @ rotation.T
    return PointCloud(points, cloud.intensity)


def column_shift(image: RangeImage, s: int) -> RangeImage:
    """Circularly move columns left by ``s``: output column j is input column j + s."""
    return RangeImage(
        grid=np.roll(image.grid, -int(s), axis=1),
        mask=np.roll(image.mask, -int(s), axis=1),
    )


def transform_cloud(cloud: PointCloud, transform: Pose) -> PointCloud:
    """Apply a rigid transform to every point; intensities are carried along."""
    points = np.asarray(cloud.points, dtype=np.float64)
    moved = points @ transform.rotation.T + transform.translation
    return PointCloud(moved, cloud.intensity)


def reproject(cloud_j: PointCloud, pose_j: Pose, pose_i: Pose, sensor: SensorModel) -> RangeImage:
    """Range image of scan j seen from the sensor frame of scan i."""
    pose_j.validate()
    pose_i.validate()
    if np.array_equal(pose_i.matrix, pose_j.matrix):
        return project(cloud_j, sensor)
    relative = pose_i.inverse() @ pose_j
    return project(transform_cloud(cloud_j, relative), sensor)
