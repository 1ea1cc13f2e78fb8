import numpy as np
import pytest

from lidar_mos.cylvoxel import VoxelFeatureGrid
from lidar_mos.errors import EmptyStack, IndexOutOfRange, ShapeMismatch
from lidar_mos.geometry import PoseSE3, invert_pose, random_pose, transform_points
from lidar_mos.kitti_io import MotionLabel, RawScan
from lidar_mos.residual import (
    ResidualStack,
    SpatialDiffParams,
    SpatialHash,
    ablation_frames,
    build_residual_stack,
    padded_residual_stack,
    spatial_diff_baseline,
    voxel_residual_features,
)


def static_world_sequence(rng, frames=4, n=60):
    """The same world points observed from a moving sensor; returns scans and relative chain"""
    world = rng.uniform(-10, 10, size=(n, 3))
    world_poses = [PoseSE3.identity()] + [random_pose(rng, translation_scale=1.0) for _ in range(frames - 1)]
    scans = [
        RawScan(np.column_stack([transform_points(world, invert_pose(pose)), np.zeros(n)]), frame_index=k)
        for k, pose in enumerate(world_poses)
    ]
    rel = [world_poses[0]] + [invert_pose(world_poses[k - 1]) @ world_poses[k] for k in range(1, frames)]
    return scans, rel


class TestBuildStack:
    def test_previous_scans_land_on_current(self, rng):
        scans, rel = static_world_sequence(rng)
        stack = build_residual_stack(scans, rel, t=3, k=3)
        assert stack.k == 3
        for frame in stack.previous:
            np.testing.assert_allclose(frame.scan.xyz, scans[3].xyz, atol=1e-9)

    def test_frame_order(self, rng):
        scans, rel = static_world_sequence(rng)
        stack = build_residual_stack(scans, rel, t=3, k=2)
        assert [f.offset for f in stack.previous] == [1, 2]
        assert stack.frames[0] is scans[3]

    def test_too_early(self, rng):
        scans, rel = static_world_sequence(rng)
        with pytest.raises(IndexOutOfRange):
            build_residual_stack(scans, rel, t=1, k=2)
        with pytest.raises(IndexOutOfRange):
            build_residual_stack(scans, rel, t=4, k=0)

    def test_chain_length_checked(self, rng):
        scans, rel = static_world_sequence(rng)
        with pytest.raises(ShapeMismatch):
            build_residual_stack(scans, rel[:-1], t=3, k=1)

    def test_k_zero(self, rng):
        scans, rel = static_world_sequence(rng)
        assert build_residual_stack(scans, rel, t=0, k=0).k == 0

    def test_padding_repeats_oldest_scan(self, rng):
        scans, rel = static_world_sequence(rng)
        stack = padded_residual_stack(scans, rel, t=1, k=3)
        assert [f.offset for f in stack.previous] == [1, 2, 3]
        np.testing.assert_array_equal(stack.previous[2].scan.xyz, stack.previous[0].scan.xyz)
        first = padded_residual_stack(scans, rel, t=0, k=2)
        assert all(f.scan is scans[0] for f in first.previous)

    def test_truncation(self, rng):
        scans, rel = static_world_sequence(rng)
        assert build_residual_stack(scans, rel, t=3, k=3).truncated(1).k == 1


class TestSpatialHash:
    def test_matches_brute_force_within_radius(self, rng):
        ref = rng.uniform(-5, 5, size=(200, 3))
        queries = rng.uniform(-6, 6, size=(50, 3))
        got = SpatialHash(ref, radius=1.0).nearest_distance(queries)
        brute = np.linalg.norm(queries[:, None] - ref[None], axis=2).min(axis=1)
        expected = np.where(brute <= 1.0, brute, np.inf)
        np.testing.assert_allclose(got, expected)

    def test_empty_reference(self):
        assert np.all(np.isinf(SpatialHash(np.zeros((0, 3)), 1.0).nearest_distance(np.ones((2, 3)))))


class TestSpatialDiffBaseline:
    def _stack_with_moved_box(self, rng):
        background = rng.uniform(-10, 10, size=(100, 3))
        box = rng.uniform(0, 1, size=(10, 3))
        previous = np.vstack([background, box])
        current = np.vstack([background, box + [5.0, 5.0, 0.0]])
        as_scan = lambda xyz: RawScan(np.column_stack([xyz, np.zeros(len(xyz))]))
        return build_residual_stack([as_scan(previous), as_scan(current)],
                                    [PoseSE3.identity(), PoseSE3.identity()], t=1, k=1)

    def test_moved_box_is_flagged(self, rng):
        stack = self._stack_with_moved_box(rng)
        labels = spatial_diff_baseline(stack, SpatialDiffParams(1.0, 0.5))
        assert np.all(labels[:100] == MotionLabel.STATIC)
        assert np.count_nonzero(labels[100:] == MotionLabel.MOVING) >= 8

    def test_infinite_threshold_marks_nothing(self, rng):
        stack = self._stack_with_moved_box(rng)
        labels = spatial_diff_baseline(stack, SpatialDiffParams(1.0, float("inf")))
        assert np.all(labels == MotionLabel.STATIC)

    def test_needs_previous_scans(self, make_points):
        with pytest.raises(EmptyStack):
            spatial_diff_baseline(ResidualStack(RawScan(make_points(3))), SpatialDiffParams())

    def test_identical_scans_are_static(self, make_points):
        scan = RawScan(make_points(40))
        stack = build_residual_stack([scan, scan], [PoseSE3.identity()] * 2, t=1, k=1)
        assert np.all(spatial_diff_baseline(stack, SpatialDiffParams()) == MotionLabel.STATIC)

    @pytest.mark.parametrize("radius,threshold", [(0.0, 0.5), (1.0, 0.0), (float("inf"), 0.5)])
    def test_invalid_params(self, radius, threshold):
        with pytest.raises(ValueError):
            SpatialDiffParams(radius, threshold)


def test_voxel_residuals(tiny_spec, rng):
    cur = VoxelFeatureGrid(rng.normal(size=(2,) + tiny_spec.bins), tiny_spec)
    prev = VoxelFeatureGrid(rng.normal(size=(2,) + tiny_spec.bins), tiny_spec)
    (res,) = voxel_residual_features(cur, [prev])
    np.testing.assert_array_equal(res.data, cur.data - prev.data)
    assert voxel_residual_features(cur, []) == []


def test_ablation_frames():
    assert ablation_frames(3) == (0, 1, 2, 3)
