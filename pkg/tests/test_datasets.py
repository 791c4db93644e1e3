"""Unit tests for scan files, manifests and the synthetic benchmark."""

import math
from pathlib import Path

import numpy as np
import pytest

from src.core.datasets import (
    POSES_NAME,
    ScanLoader,
    generate_world,
    load_cloud,
    load_manifest,
    load_poses,
    make_benchmark,
    simulate_scan,
    world_for,
    write_cloud,
    write_manifest,
    write_poses,
)
from src.core.exceptions import DataError
from src.core.models import DatasetManifest, PointCloud, Pose, ScanEntry, SensorModel
from src.core.rangeproj import column_shift, project


@pytest.fixture
def sensor():
    return SensorModel(width=36, height=8, f_up=math.radians(20.0), f_down=math.radians(10.0), max_range=50.0)


@pytest.fixture
def small_benchmark(sensor):
    return make_benchmark(seed=1, scans=20, sensor=sensor, extent=40.0, obstacle_count=30)


class TestCloudFiles:
    """Tests for velodyne-layout binary clouds."""

    def test_round_trip(self, tmp_path):
        cloud = PointCloud(np.array([[1.0, 2.0, 3.0], [-4.0, 5.5, 0.25]], dtype=np.float32),
                           np.array([0.1, 0.9], dtype=np.float32))
        path = tmp_path / "000000.bin"
        write_cloud(path, cloud)
        loaded = load_cloud(path)
        np.testing.assert_array_equal(loaded.points, cloud.points)
        np.testing.assert_array_equal(loaded.intensity, cloud.intensity)

    def test_incomplete_record(self, tmp_path):
        """Test that a partial trailing record reports its byte offset."""
        path = tmp_path / "bad.bin"
        path.write_bytes(b'\x00' * 20)
        with pytest.raises(DataError) as exc_info:
            load_cloud(path)
        assert "byte offset 16" in str(exc_info.value)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b'')
        with pytest.raises(DataError) as exc_info:
            load_cloud(path)
        assert "empty cloud file" in str(exc_info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError) as exc_info:
            load_cloud(tmp_path / "nope.bin")
        assert "not found" in str(exc_info.value)


class TestPoseFiles:
    """Tests for odometry-layout pose files."""

    def test_round_trip(self, tmp_path):
        poses = [Pose.from_yaw(0.3, 1.0, -2.0, 1.7), Pose.identity()]
        path = tmp_path / POSES_NAME
        write_poses(path, poses)
        loaded = load_poses(path)
        assert len(loaded) == 2
        np.testing.assert_array_equal(loaded[0].matrix, poses[0].matrix)

    def test_bad_line_is_named(self, tmp_path):
        path = tmp_path / POSES_NAME
        path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n", encoding='utf-8')
        with pytest.raises(DataError) as exc_info:
            load_poses(path)
        assert "line 2: expected 12 values, got 11" in str(exc_info.value)

    def test_non_numeric_value(self, tmp_path):
        path = tmp_path / POSES_NAME
        path.write_text("1 0 0 0 0 1 0 0 0 0 1 x\n", encoding='utf-8')
        with pytest.raises(DataError) as exc_info:
            load_poses(path)
        assert "line 1: non-numeric" in str(exc_info.value)


class TestSyntheticWorld:
    """Tests for world generation and ray casting."""

    def test_same_seed_same_world(self):
        a = generate_world(4, 60.0, 40)
        b = generate_world(4, 60.0, 40)
        assert a == b
        assert a.obstacle_count == 40

    def test_road_is_clear(self):
        """Test that no obstacle footprint reaches into the road."""
        radius, clearance = 24.0, 4.0
        world = generate_world(2, 80.0, 60, road_radius=radius)
        for box in world.boxes:
            footprint = 0.5 * math.hypot(box.size[0], box.size[1])
            assert abs(math.hypot(box.center[0], box.center[1]) - radius) >= clearance + footprint
        for cyl in world.cylinders:
            assert abs(math.hypot(*cyl.center) - radius) >= clearance + cyl.radius

    def test_bad_extent_raises(self):
        with pytest.raises(DataError):
            generate_world(0, 0.0, 10)

    def test_points_project_into_own_pixels(self, sensor):
        """Test that every simulated point lands in a distinct pixel."""
        world = generate_world(3, 40.0, 30, road_radius=10.0)
        cloud = simulate_scan(world, Pose.from_yaw(math.pi / 2, 10.0, 0.0, 1.7), sensor)
        assert len(cloud) > 0
        assert project(cloud, sensor).valid_count == len(cloud)
        assert np.all(np.linalg.norm(cloud.points, axis=1) <= sensor.max_range + 1e-3)

    def test_ground_range_straight_down(self):
        """Test that the lowest ray meets the ground at the expected distance."""
        sensor = SensorModel(width=4, height=2, f_up=math.radians(40.0), f_down=math.radians(0.0), max_range=50.0)
        world = generate_world(0, 10.0, 0)
        cloud = simulate_scan(world, Pose.from_yaw(0.0, z=1.7), sensor)
        lowest = -sensor.f_up + 0.25 * sensor.fov
        expected = 1.7 / math.sin(-lowest)
        ranges = np.linalg.norm(cloud.points, axis=1)
        assert ranges.min() == pytest.approx(expected, rel=1e-5)


class TestBenchmark:
    """Tests for the two-pass synthetic benchmark."""

    def test_split_counts(self):
        manifest = make_benchmark(seed=0, scans=600)
        assert len(manifest.split('database')) == 300
        assert len(manifest.split('query')) == 300
        assert sum(s.reversed_segment for s in manifest.scans) == 75
        assert [s.index for s in manifest.scans] == list(range(600))

    def test_reversed_scans_face_backwards(self):
        """Test that reversed query scans head opposite to the database pass."""
        manifest = make_benchmark(seed=0, scans=40)
        reversed_scans = [s for s in manifest.scans if s.reversed_segment]
        assert reversed_scans
        for scan in reversed_scans:
            heading = scan.pose.rotation[:2, 0]
            nearest = min(manifest.split('database'),
                          key=lambda d: np.linalg.norm(d.pose.translation - scan.pose.translation))
            assert float(heading @ nearest.pose.rotation[:2, 0]) < 0

    def test_manifest_round_trip(self, small_benchmark, tmp_path):
        write_manifest(tmp_path, small_benchmark)
        loaded = load_manifest(tmp_path / "manifest.json")
        assert [s.index for s in loaded.scans] == [s.index for s in small_benchmark.scans]
        assert [s.reversed_segment for s in loaded.scans] == [s.reversed_segment for s in small_benchmark.scans]
        assert loaded.world_seed == 1
        assert loaded.sensor == small_benchmark.sensor
        for a, b in zip(loaded.poses(), small_benchmark.poses()):
            np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_pose_count_mismatch(self, small_benchmark, tmp_path):
        write_manifest(tmp_path, small_benchmark)
        poses = (tmp_path / POSES_NAME).read_text(encoding='utf-8').splitlines()
        (tmp_path / POSES_NAME).write_text("\n".join(poses[:5]) + "\n", encoding='utf-8')
        with pytest.raises(DataError) as exc_info:
            load_manifest(tmp_path / "manifest.json")
        assert "lists 20 scans but the pose file has 5 poses" in str(exc_info.value)

    def test_world_needs_synthetic_manifest(self, sensor):
        manifest = DatasetManifest(scans=[ScanEntry(0, Pose.identity(), 'database')], sensor=sensor)
        with pytest.raises(DataError):
            world_for(manifest)


class TestScanLoader:
    """Tests for loading scans by index."""

    def test_ids_and_passes(self, small_benchmark):
        loader = ScanLoader(small_benchmark)
        assert loader.ids('database') == list(range(10))
        assert loader.ids('query') == list(range(10, 20))
        assert loader.pass_ids() == [list(range(10)), list(range(10, 20))]

    def test_unknown_scan(self, small_benchmark):
        with pytest.raises(DataError) as exc_info:
            ScanLoader(small_benchmark).image(99)
        assert "scan 99" in str(exc_info.value)

    def test_images_are_cached(self, small_benchmark):
        loader = ScanLoader(small_benchmark)
        assert loader[3] is loader.image(3)

    def test_rotation_by_whole_columns(self, small_benchmark, sensor):
        """Test that turning the sensor by k columns shifts the image by -k."""
        loader = ScanLoader(small_benchmark)
        image = loader.image(4)
        for k in (1, 7, 20):
            rotated = loader.rotated_image(4, k * sensor.azimuth_step)
            expected = column_shift(image, -k)
            np.testing.assert_array_equal(rotated.mask, expected.mask)
            np.testing.assert_allclose(rotated.grid, expected.grid, atol=1e-3)

    def test_cloud_files_relative_to_manifest(self, sensor, tmp_path):
        cloud = PointCloud(np.array([[10.0, 0.0, 0.0]], dtype=np.float32))
        write_cloud(tmp_path / "clouds" / "000000.bin", cloud)
        manifest = DatasetManifest(
            scans=[ScanEntry(0, Pose.identity(), 'database', cloud_path=Path("clouds/000000.bin"))],
            sensor=sensor)
        write_manifest(tmp_path, manifest)
        loader = ScanLoader(load_manifest(tmp_path / "manifest.json"))
        np.testing.assert_array_equal(loader.cloud(0).points, cloud.points)
        assert loader.image(0).valid_count == 1
