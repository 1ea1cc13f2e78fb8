"""
Residual scans

A residual stack holds the current scan plus the k previous scans re-expressed
in the current frame. Two consumers:

- the learned model, which voxelizes every frame on the shared cylindrical grid
  and subtracts grids in the feature layer
- the spatial-difference baseline, which flags a current point as moving when
  no previous scan has a point near it
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cylvoxel import VoxelFeatureGrid
from .errors import EmptyStack, IndexOutOfRange, ShapeMismatch
from .geometry import PoseSE3, compose_relative, transform_scan
from .kitti_io import MotionLabel, RawScan

DEFAULT_RESIDUAL_FRAMES = 3


@dataclass(frozen=True)
class ResidualFrame:
    offset: int
    scan: RawScan


@dataclass(frozen=True)
class ResidualStack:
    """Current scan plus previous scans expressed in the current frame"""
    current: RawScan
    previous: tuple[ResidualFrame, ...] = ()

    def __post_init__(self):
        offsets = [f.offset for f in self.previous]
        if offsets != list(range(1, len(offsets) + 1)):
            raise ValueError(f"residual offsets must be 1..k, got {offsets}")

    @property
    def k(self) -> int:
        return len(self.previous)

    @property
    def frames(self) -> list[RawScan]:
        """Current scan first, then previous scans by increasing offset"""
        return [self.current] + [f.scan for f in self.previous]

    def truncated(self, k: int) -> "ResidualStack":
        return ResidualStack(current=self.current, previous=self.previous[:k])


@dataclass(frozen=True)
class SpatialDiffParams:
    neighbor_radius: float = 1.0
    distance_threshold: float = 0.5

    def __post_init__(self):
        if not (self.neighbor_radius > 0 and math.isfinite(self.neighbor_radius)):
            raise ValueError(f"neighbor_radius must be positive and finite, got {self.neighbor_radius}")
        if not self.distance_threshold > 0:
            raise ValueError(f"distance_threshold must be positive, got {self.distance_threshold}")


def build_residual_stack(scans: Sequence[RawScan], rel_poses: Sequence[PoseSE3],
                         t: int, k: int = DEFAULT_RESIDUAL_FRAMES) -> ResidualStack:
    """
    Stack for frame t with k previous scans moved into frame t

    Args:
        scans: Scan sequence
        rel_poses: Scan-aligned relative poses, rel_poses[j] = T_j^{j-1}
        t: Current frame index
        k: Number of residual frames

    Raises:
        IndexOutOfRange: t < k, or t outside the sequence
    """
    if k < 0:
        raise IndexOutOfRange(f"k must be >= 0, got {k}")
    if not 0 <= t < len(scans):
        raise IndexOutOfRange(f"t={t} outside sequence of {len(scans)} scans")
    if t < k:
        raise IndexOutOfRange(f"t={t} has fewer than k={k} previous scans")
    if len(rel_poses) != len(scans):
        raise ShapeMismatch(f"{len(scans)} scans but {len(rel_poses)} relative poses")
    previous = tuple(
        ResidualFrame(offset=i, scan=transform_scan(scans[t - i], compose_relative(rel_poses, t - i, t)))
        for i in range(1, k + 1)
    )
    return ResidualStack(current=scans[t], previous=previous)


class SpatialHash:
    """
    Uniform grid hash over 3-D points with cell size = radius

    nearest_distance() is exact for neighbors within the radius and reports
    +inf for points whose nearest neighbor lies farther away.
    """

    def __init__(self, xyz: np.ndarray, radius: float):
        self.radius = float(radius)
        self.xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        cells = np.floor(self.xyz / self.radius).astype(np.int64)
        self._origin = cells.min(axis=0) - 1 if len(cells) else np.zeros(3, dtype=np.int64)
        self._extent = (cells.max(axis=0) - self._origin + 2) if len(cells) else np.ones(3, dtype=np.int64)
        keys = self._encode(cells)
        self._order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._order]

    def _encode(self, cells: np.ndarray) -> np.ndarray:
        rel = cells - self._origin
        _, ey, ez = self._extent
        inside = np.all((rel >= 0) & (rel < self._extent), axis=1)
        keys = (rel[:, 0] * ey + rel[:, 1]) * ez + rel[:, 2]
        return np.where(inside, keys, -1)

    def nearest_distance(self, queries: np.ndarray) -> np.ndarray:
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        best = np.full(len(queries), np.inf)
        if len(self.xyz) == 0 or len(queries) == 0:
            return best
        base = np.floor(queries / self.radius).astype(np.int64)
        for offset in np.array(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij")).reshape(3, -1).T:
            keys = self._encode(base + offset)
            start = np.searchsorted(self._sorted_keys, keys, side="left")
            stop = np.searchsorted(self._sorted_keys, keys, side="right")
            count = np.where(keys >= 0, stop - start, 0)
            for j in range(int(count.max(initial=0))):
                active = np.flatnonzero(count > j)
                cand = self._order[start[active] + j]
                dist = np.linalg.norm(self.xyz[cand] - queries[active], axis=1)
                best[active] = np.minimum(best[active], dist)
        best[best > self.radius] = np.inf
        return best


def spatial_diff_baseline(stack: ResidualStack, params: SpatialDiffParams) -> np.ndarray:
    """
    Non-learned moving-point detector

    A current point is Moving iff, in every transformed previous scan, its
    nearest neighbor is farther than distance_threshold.

    Raises:
        EmptyStack: The stack has no previous scans
    """
    if stack.k == 0:
        raise EmptyStack("spatial difference needs at least one previous scan")
    query = stack.current.xyz
    if math.isinf(params.distance_threshold):
        return np.full(len(query), MotionLabel.STATIC, dtype=np.uint8)
    # search radius must cover the threshold
    radius = max(params.neighbor_radius, params.distance_threshold)
    moving = np.ones(len(query), dtype=bool)
    for frame in stack.previous:
        nearest = SpatialHash(frame.scan.xyz, radius).nearest_distance(query)
        moving &= nearest > params.distance_threshold
    return np.where(moving, MotionLabel.MOVING, MotionLabel.STATIC).astype(np.uint8)


def voxel_residual_features(current_grid: VoxelFeatureGrid,
                            prev_grids: Sequence[VoxelFeatureGrid]) -> list[VoxelFeatureGrid]:
    """R_i = current - previous_i, elementwise on the shared grid"""
    out = []
    for i, prev in enumerate(prev_grids):
        if prev.data.shape != current_grid.data.shape:
            raise ShapeMismatch(
                f"residual grid {i} has shape {prev.data.shape}, expected {current_grid.data.shape}"
            )
        out.append(VoxelFeatureGrid(data=current_grid.data - prev.data, spec=current_grid.spec))
    return out


def ablation_frames(max_k: int = DEFAULT_RESIDUAL_FRAMES) -> tuple[int, ...]:
    """Residual counts evaluated by the ablation protocol: 0, 1, ..., max_k"""
    return tuple(range(max_k + 1))


def padded_residual_stack(scans: Sequence[RawScan], rel_poses: Sequence[PoseSE3],
                          t: int, k: int = DEFAULT_RESIDUAL_FRAMES) -> ResidualStack:
    """
    Like build_residual_stack, but frames with t < k repeat their oldest
    available scan (the current one at t = 0) for the missing offsets
    """
    if t >= k:
        return build_residual_stack(scans, rel_poses, t, k)
    stack = build_residual_stack(scans, rel_poses, t, t)
    oldest = stack.previous[-1].scan if stack.previous else stack.current
    padding = tuple(ResidualFrame(offset=i, scan=oldest) for i in range(t + 1, k + 1))
    return ResidualStack(current=stack.current, previous=stack.previous + padding)
