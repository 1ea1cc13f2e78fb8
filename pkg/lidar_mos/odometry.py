"""
Naive frame-to-frame scan matching

Point-to-point ICP: nearest-neighbour correspondences from a k-d tree over
the previous scan, closed-form rigid alignment by SVD, repeated until the
update is negligible. Chaining the per-frame estimates gives a trajectory
whose accuracy depends on how many moving points pollute the matches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import LengthMismatch
from .geometry import PoseSE3, compose, nearest_rotation, transform_points
from .kitti_io import RawScan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OdometryConfig:
    iterations: int = 20
    max_correspondence: float = 2.0
    tolerance: float = 1e-6
    min_correspondences: int = 6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not self.max_correspondence > 0:
            raise ValueError(f"max_correspondence must be > 0, got {self.max_correspondence}")


@dataclass(frozen=True)
class ICPResult:
    pose: PoseSE3     # maps source points into the target frame
    rmse: float
    inliers: int
    iterations: int


def best_fit_transform(source: np.ndarray, target: np.ndarray) -> PoseSE3:
    """Least-squares rigid transform taking source onto target (Kabsch)"""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    h = (source - mu_s).T @ (target - mu_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    rotation = nearest_rotation(rotation)
    return PoseSE3.from_rt(rotation, mu_t - rotation @ mu_s)


def icp_point_to_point(source: np.ndarray, target: np.ndarray, cfg: OdometryConfig = OdometryConfig(),
                       initial: PoseSE3 | None = None, tree: cKDTree | None = None) -> ICPResult:
    """
    Align source (N, 3) to target (M, 3)

    Correspondences farther apart than max_correspondence are dropped. With
    fewer than min_correspondences matches the current estimate is returned.
    """
    tree = tree if tree is not None else cKDTree(target)
    pose = initial or PoseSE3.identity()
    rmse, inliers, used = float("inf"), 0, 0
    for used in range(1, cfg.iterations + 1):
        moved = transform_points(source, pose)
        dist, idx = tree.query(moved, distance_upper_bound=cfg.max_correspondence)
        valid = np.isfinite(dist)
        inliers = int(valid.sum())
        if inliers < cfg.min_correspondences:
            logger.debug("icp: only %d correspondences", inliers)
            break
        rmse = float(np.sqrt(np.mean(dist[valid] ** 2)))
        step = best_fit_transform(moved[valid], target[idx[valid]])
        pose = compose(step, pose)
        delta = np.abs(step.matrix - np.eye(4)).max()
        if delta < cfg.tolerance:
            break
    return ICPResult(pose=pose, rmse=rmse, inliers=inliers, iterations=used)


def run_odometry(scans: Sequence[RawScan], cfg: OdometryConfig = OdometryConfig(),
                 keep_masks: Sequence[np.ndarray] | None = None,
                 initial: PoseSE3 | None = None) -> list[PoseSE3]:
    """
    World poses by chaining frame-to-frame ICP

    keep_masks, when given, select the points of each scan used for matching
    (e.g. the non-moving ones). Each registration starts from the previous
    relative motion.
    """
    if keep_masks is not None and len(keep_masks) != len(scans):
        raise LengthMismatch(f"{len(scans)} scans but {len(keep_masks)} keep masks")
    if not scans:
        return []

    def points_of(k: int) -> np.ndarray:
        xyz = scans[k].xyz
        return xyz if keep_masks is None else xyz[np.asarray(keep_masks[k], dtype=bool)]

    poses = [initial or PoseSE3.identity()]
    motion = PoseSE3.identity()
    target = points_of(0)
    for k in range(1, len(scans)):
        source = points_of(k)
        result = icp_point_to_point(source, target, cfg, initial=motion)
        motion = result.pose
        poses.append(compose(poses[-1], motion))
        target = source
        logger.debug("odometry frame %d: rmse %.4f, %d inliers", k, result.rmse, result.inliers)
    return poses
