"""Unit tests for range-image projection."""

import math

import numpy as np
import pytest

from src.cli.selftest import pixel_centred_cloud
from src.core.exceptions import DataError
from src.core.models import INVALID_RANGE, PointCloud, Pose, RangeImage, SensorModel
from src.core.rangeproj import column_shift, project, reproject, transform_cloud, yaw_rotate


@pytest.fixture
def sensor():
    """Small sensor with the default elevation offsets."""
    return SensorModel(width=36, height=8, max_range=50.0)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestProject:
    """Tests for spherical projection."""

    def test_forward_point_lands_in_middle_column(self, sensor):
        """Test that a point straight ahead lands in column w/2."""
        image = project(PointCloud([[10.0, 0.0, 0.0]]), sensor)
        u = sensor.width // 2
        v = math.floor((1.0 - sensor.f_up / sensor.fov) * sensor.height)
        assert image.mask[v, u]
        assert image.grid[v, u] == pytest.approx(10.0)
        assert image.valid_count == 1

    def test_negative_pi_azimuth_wraps_to_column_zero(self, sensor):
        """Test that atan2 = -pi is folded onto column 0."""
        image = project(PointCloud([[-10.0, -0.0, 0.0]]), sensor)
        assert image.mask[:, 0].any()
        assert not image.mask[:, -1].any()

    def test_nearest_point_wins(self, sensor):
        """Test that the nearest of several points in one pixel is kept."""
        cloud = PointCloud([[20.0, 0.0, 0.0], [5.0, 0.0, 0.0], [12.0, 0.0, 0.0]])
        image = project(cloud, sensor)
        assert image.valid_count == 1
        assert image.grid[image.mask][0] == pytest.approx(5.0)

    def test_points_outside_fov_are_dropped(self, sensor):
        """Test that points above or below the vertical field of view are ignored."""
        cloud = PointCloud([[1.0, 0.0, 10.0], [1.0, 0.0, -10.0]])
        image = project(cloud, sensor)
        assert image.valid_count == 0
        assert np.all(image.grid == INVALID_RANGE)

    def test_empty_cloud_raises(self, sensor):
        """Test that projecting an empty cloud is an error."""
        with pytest.raises(DataError) as exc_info:
            project(PointCloud(np.zeros((0, 3))), sensor)
        assert "empty point cloud" in str(exc_info.value)

    def test_bad_point_shape_raises(self):
        """Test that clouds must be (N, 3)."""
        with pytest.raises(DataError) as exc_info:
            PointCloud(np.zeros((4, 2)))
        assert "(N, 3)" in str(exc_info.value)


class TestColumnShift:
    """Tests for circular column shifts."""

    def test_shift_moves_columns_left(self):
        """Test that output column j is input column j + s."""
        grid = np.tile(np.arange(1, 7, dtype=np.float32), (2, 1))
        image = RangeImage.from_grid(grid)
        shifted = column_shift(image, 2)
        np.testing.assert_array_equal(shifted.grid[0], [3, 4, 5, 6, 1, 2])

    def test_shift_by_width_is_identity(self, rng):
        """Test that shifting by the full width returns the same image."""
        image = RangeImage.from_grid(rng.uniform(1, 10, size=(4, 9)))
        assert column_shift(image, 9).equals(image)

    def test_rotation_commutes_with_shift(self, sensor, rng):
        """Test that rotating by k columns equals shifting the projection by k."""
        for _ in range(20):
            cloud = pixel_centred_cloud(rng, sensor, 150)
            k = int(rng.integers(0, sensor.width))
            rotated = project(yaw_rotate(cloud, k * sensor.azimuth_step), sensor)
            shifted = column_shift(project(cloud, sensor), k)
            np.testing.assert_array_equal(rotated.mask, shifted.mask)
            np.testing.assert_allclose(rotated.grid, shifted.grid, atol=1e-4)


class TestReproject:
    """Tests for reprojection into another scan's frame."""

    def test_same_pose_equals_projection(self, sensor, rng):
        """Test that reprojecting onto the same pose is a plain projection."""
        cloud = pixel_centred_cloud(rng, sensor, 100)
        pose = Pose.from_yaw(0.3, 1.0, 2.0, 0.0)
        assert reproject(cloud, pose, pose, sensor).equals(project(cloud, sensor))

    def test_translation_changes_range(self, sensor):
        """Test that a point seen from 5 m behind is 5 m further away."""
        cloud = PointCloud([[10.0, 0.0, 0.0]])
        image = reproject(cloud, Pose.from_yaw(0.0, x=5.0), Pose.identity(), sensor)
        assert image.grid[image.mask][0] == pytest.approx(15.0)

    def test_rotation_between_frames(self, sensor):
        """Test that a quarter turn of scan j shows its forward point on the left of scan i."""
        cloud = PointCloud([[10.0, 0.0, 0.0]])
        moved = transform_cloud(cloud, Pose.from_yaw(math.pi / 2))
        np.testing.assert_allclose(moved.points[0], [0.0, 10.0, 0.0], atol=1e-9)

    def test_invalid_pose_raises(self, sensor, rng):
        """Test that a non-rigid pose is rejected."""
        bad = Pose(np.diag([2.0, 1.0, 1.0, 1.0]))
        with pytest.raises(DataError) as exc_info:
            reproject(pixel_centred_cloud(rng, sensor, 10), bad, Pose.identity(), sensor)
        assert "rigid" in str(exc_info.value)
