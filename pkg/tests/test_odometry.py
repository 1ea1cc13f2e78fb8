import numpy as np
import pytest

from lidar_mos.errors import LengthMismatch
from lidar_mos.geometry import PoseSE3, invert_pose, random_pose, transform_points
from lidar_mos.kitti_io import RawScan
from lidar_mos.odometry import OdometryConfig, best_fit_transform, icp_point_to_point, run_odometry


@pytest.fixture
def cloud(rng):
    return rng.uniform(low=(-5.0, -5.0, -1.0), high=(5.0, 5.0, 1.0), size=(2000, 3))


def as_scan(xyz: np.ndarray) -> RawScan:
    return RawScan(np.hstack([xyz, np.zeros((len(xyz), 1))]))


def test_best_fit_recovers_known_pose(rng, cloud):
    truth = random_pose(rng, translation_scale=3.0)
    estimate = best_fit_transform(cloud, transform_points(cloud, truth))
    assert estimate.allclose(truth, atol=1e-9)


def test_icp_aligns_small_offset(cloud):
    truth = PoseSE3.rotation_z(0.02, (0.2, -0.1, 0.05))
    result = icp_point_to_point(cloud, transform_points(cloud, truth), OdometryConfig(iterations=50))
    assert result.pose.allclose(truth, atol=1e-2)
    assert result.inliers > 0.9 * len(cloud)
    assert result.rmse < 0.1


def test_icp_gives_up_without_correspondences(cloud):
    far = cloud + 100.0
    result = icp_point_to_point(cloud, far)
    assert result.pose.allclose(PoseSE3.identity())
    assert result.inliers == 0 and result.iterations == 1


class TestRunOdometry:
    def test_recovers_trajectory_of_static_scene(self, cloud):
        world = [PoseSE3.identity(), PoseSE3.rotation_z(0.01, (0.2, 0.0, 0.0)),
                 PoseSE3.rotation_z(0.02, (0.4, 0.05, 0.0))]
        scans = [as_scan(transform_points(cloud, invert_pose(w))) for w in world]
        estimate = run_odometry(scans, OdometryConfig(iterations=50))
        assert len(estimate) == 3
        for got, want in zip(estimate, world):
            assert got.allclose(want, atol=2e-2)

    def test_initial_pose_is_first_estimate(self, cloud):
        start = PoseSE3.from_translation((5.0, 1.0, 0.0))
        (only,) = run_odometry([as_scan(cloud)], initial=start)
        assert only.allclose(start)

    def test_empty(self):
        assert run_odometry([]) == []

    def test_mask_count_must_match(self, cloud):
        with pytest.raises(LengthMismatch):
            run_odometry([as_scan(cloud)] * 2, keep_masks=[np.ones(len(cloud), dtype=bool)])

    def test_masks_drop_points(self, cloud):
        scans = [as_scan(cloud)] * 2
        keep = [np.arange(len(cloud)) < 1000] * 2
        estimate = run_odometry(scans, keep_masks=keep)
        assert estimate[1].allclose(PoseSE3.identity(), atol=1e-6)


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"max_correspondence": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OdometryConfig(**kwargs)
