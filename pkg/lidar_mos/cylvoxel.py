"""
Cylindrical partition

Points are binned uniformly in (rho, theta, z). The point-voxel mapping keeps
each point's voxel index and its offset from the voxel center, which supports
max-pool scatter (points -> voxels) and gather (voxels -> points).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateSpec, ShapeMismatch
from .kitti_io import MotionLabel, RawScan

OUT_OF_RANGE = -1


@dataclass(frozen=True)
class CylindricalGridSpec:
    """Grid of H radius bins x W azimuth bins x L height bins"""
    bins: tuple[int, int, int] = (24, 32, 8)
    rho_range: tuple[float, float] = (0.0, 40.0)
    z_range: tuple[float, float] = (-3.0, 5.0)

    def __post_init__(self):
        bins = tuple(int(b) for b in self.bins)
        if len(bins) != 3 or min(bins) < 1:
            raise DegenerateSpec(f"bins must be three positive ints, got {self.bins}")
        rho_min, rho_max = (float(v) for v in self.rho_range)
        z_min, z_max = (float(v) for v in self.z_range)
        if not all(math.isfinite(v) for v in (rho_min, rho_max, z_min, z_max)):
            raise DegenerateSpec("grid ranges must be finite")
        if not 0.0 <= rho_min < rho_max:
            raise DegenerateSpec(f"need 0 <= rho_min < rho_max, got {self.rho_range}")
        if not z_min < z_max:
            raise DegenerateSpec(f"need z_min < z_max, got {self.z_range}")
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "rho_range", (rho_min, rho_max))
        object.__setattr__(self, "z_range", (z_min, z_max))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bins

    @property
    def num_voxels(self) -> int:
        h, w, l = self.bins
        return h * w * l

    @property
    def cell_size(self) -> tuple[float, float, float]:
        """(drho meters, dtheta radians, dz meters)"""
        h, w, l = self.bins
        return (
            (self.rho_range[1] - self.rho_range[0]) / h,
            2.0 * math.pi / w,
            (self.z_range[1] - self.z_range[0]) / l,
        )


class CylindricalPoint(NamedTuple):
    rho: float
    theta: float
    z: float

    @classmethod
    def from_cartesian(cls, x: float, y: float, z: float) -> "CylindricalPoint":
        rho, theta, zc = to_cylindrical(np.array([x, y, z], dtype=np.float64))
        return cls(float(rho), float(theta), float(zc))


def to_cylindrical(xyz: np.ndarray) -> np.ndarray:
    """
    Cartesian -> (rho, theta, z) on the last axis

    theta = atan2(y, x) folded into [-pi, pi)
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    rho = np.hypot(xyz[..., 0], xyz[..., 1])
    theta = np.arctan2(xyz[..., 1], xyz[..., 0])
    theta = np.where(theta >= np.pi, theta - 2.0 * np.pi, theta)
    return np.stack([rho, theta, xyz[..., 2]], axis=-1)


def from_cylindrical(cyl: np.ndarray) -> np.ndarray:
    cyl = np.asarray(cyl, dtype=np.float64)
    rho, theta = cyl[..., 0], cyl[..., 1]
    return np.stack([rho * np.cos(theta), rho * np.sin(theta), cyl[..., 2]], axis=-1)


@dataclass(frozen=True)
class PointVoxelMapping:
    """
    Per-point voxel assignment

    voxel_index: (N, 3) int64 (h, w, l), rows of OUT_OF_RANGE for excluded points
    within_voxel_offset: (N, 3) (drho, dtheta * rho_center, dz) in meters
    cylindrical: (N, 3) (rho, theta, z) of each point
    """
    voxel_index: np.ndarray
    within_voxel_offset: np.ndarray
    cylindrical: np.ndarray
    spec: CylindricalGridSpec

    def __len__(self) -> int:
        return self.voxel_index.shape[0]

    @property
    def in_range(self) -> np.ndarray:
        return self.voxel_index[:, 0] != OUT_OF_RANGE

    @property
    def flat_index(self) -> np.ndarray:
        """Row-major voxel id h*W*L + w*L + l, OUT_OF_RANGE where excluded"""
        _, w, l = self.spec.bins
        idx = self.voxel_index
        flat = (idx[:, 0] * w + idx[:, 1]) * l + idx[:, 2]
        return np.where(self.in_range, flat, OUT_OF_RANGE)


def assign_voxels(scan: RawScan | np.ndarray, spec: CylindricalGridSpec) -> PointVoxelMapping:
    """
    Uniform binning of every point into the cylindrical grid

    Points with rho or z outside [min, max] are OutOfRange; rho == rho_max and
    z == z_max clamp into the last bin.
    """
    xyz = scan.xyz if isinstance(scan, RawScan) else np.asarray(scan, dtype=np.float64)[:, :3]
    cyl = to_cylindrical(xyz.reshape(-1, 3))
    h_bins, w_bins, l_bins = spec.bins
    drho, dtheta, dz = spec.cell_size
    rho_min, rho_max = spec.rho_range
    z_min, z_max = spec.z_range

    rho, theta, z = cyl[:, 0], cyl[:, 1], cyl[:, 2]
    valid = (rho >= rho_min) & (rho <= rho_max) & (z >= z_min) & (z <= z_max)

    h = np.minimum(np.floor((rho - rho_min) / drho), h_bins - 1)
    w = np.clip(np.floor((theta + np.pi) / dtheta), 0, w_bins - 1)
    l = np.minimum(np.floor((z - z_min) / dz), l_bins - 1)
    index = np.stack([h, w, l], axis=1)
    index = np.where(valid[:, None], index, OUT_OF_RANGE).astype(np.int64)

    rho_c = rho_min + (index[:, 0] + 0.5) * drho
    theta_c = -np.pi + (index[:, 1] + 0.5) * dtheta
    z_c = z_min + (index[:, 2] + 0.5) * dz
    offset = np.stack([rho - rho_c, (theta - theta_c) * rho_c, z - z_c], axis=1)
    offset[~valid] = 0.0
    return PointVoxelMapping(voxel_index=index, within_voxel_offset=offset, cylindrical=cyl, spec=spec)


@dataclass
class VoxelFeatureGrid:
    """Dense (C, H, W, L) feature tensor over a cylindrical grid"""
    data: np.ndarray
    spec: CylindricalGridSpec

    def __post_init__(self):
        if self.data.ndim != 4 or tuple(self.data.shape[1:]) != self.spec.bins:
            raise ShapeMismatch(
                f"grid data {self.data.shape} does not match spec bins {self.spec.bins}"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ScatterResult:
    """Max-pooled grid plus, per (voxel, channel), the index of the winning point"""
    grid: VoxelFeatureGrid
    winners: np.ndarray  # (V, C) point index, N where the voxel is empty


def scatter_max_pool_with_argmax(point_features: np.ndarray, mapping: PointVoxelMapping,
                                 spec: CylindricalGridSpec) -> ScatterResult:
    """Channelwise max over each voxel's points; ties resolve to the lowest point index"""
    feats = np.asarray(point_features)
    if feats.ndim != 2 or feats.shape[0] != len(mapping):
        raise ShapeMismatch(
            f"features {feats.shape} do not match mapping of {len(mapping)} points"
        )
    n, c = feats.shape
    v = spec.num_voxels
    keep = mapping.in_range
    flat = mapping.flat_index[keep]
    kept_feats = feats[keep]
    kept_ids = np.flatnonzero(keep)

    pooled = np.full((v, c), -np.inf, dtype=feats.dtype)
    np.maximum.at(pooled, flat, kept_feats)

    winners = np.full((v, c), n, dtype=np.int64)
    if kept_ids.size:
        rows, cols = np.nonzero(kept_feats == pooled[flat])
        np.minimum.at(winners, (flat[rows], cols), kept_ids[rows])

    pooled[np.isneginf(pooled)] = 0.0
    data = pooled.T.reshape((c,) + spec.bins)
    return ScatterResult(grid=VoxelFeatureGrid(data=np.ascontiguousarray(data), spec=spec), winners=winners)


def scatter_max_pool(point_features: np.ndarray, mapping: PointVoxelMapping,
                     spec: CylindricalGridSpec) -> VoxelFeatureGrid:
    """Max-pool per-point C-vectors into their voxels; empty voxels hold 0"""
    return scatter_max_pool_with_argmax(point_features, mapping, spec).grid


def scatter_max_pool_backward(grad_grid: np.ndarray, winners: np.ndarray, num_points: int) -> np.ndarray:
    """Route each voxel-channel gradient to the point that won the max"""
    c = grad_grid.shape[0]
    grad_flat = grad_grid.reshape(c, -1).T
    grad_points = np.zeros((num_points + 1, c), dtype=grad_grid.dtype)
    cols = np.broadcast_to(np.arange(c), winners.shape)
    np.add.at(grad_points, (winners, cols), grad_flat)
    return grad_points[:num_points]


def gather_point_features(grid: VoxelFeatureGrid, mapping: PointVoxelMapping) -> np.ndarray:
    """Each in-range point receives its voxel's feature vector, others the zero vector"""
    if grid.spec.bins != mapping.spec.bins:
        raise ShapeMismatch(f"grid bins {grid.spec.bins} != mapping bins {mapping.spec.bins}")
    c = grid.channels
    flat_grid = grid.data.reshape(c, -1)
    out = np.zeros((len(mapping), c), dtype=grid.data.dtype)
    keep = mapping.in_range
    out[keep] = flat_grid[:, mapping.flat_index[keep]].T
    return out


def gather_point_features_backward(grad_points: np.ndarray, mapping: PointVoxelMapping) -> np.ndarray:
    """Scatter-add point gradients back onto their voxels, shape (C, H, W, L)"""
    c = grad_points.shape[1]
    grad = np.zeros((mapping.spec.num_voxels, c), dtype=grad_points.dtype)
    keep = mapping.in_range
    np.add.at(grad, mapping.flat_index[keep], grad_points[keep])
    return grad.T.reshape((c,) + mapping.spec.bins)


def voxel_majority_labels(motion: np.ndarray, mapping: PointVoxelMapping) -> np.ndarray:
    """
    Voxel targets by majority vote of point motion labels

    Ignore points do not vote; ties and empty voxels become IGNORE.
    Returns a flat (V,) uint8 array in row-major voxel order.
    """
    motion = np.asarray(motion)
    if motion.shape[0] != len(mapping):
        raise ShapeMismatch(f"{motion.shape[0]} labels for {len(mapping)} points")
    v = mapping.spec.num_voxels
    keep = mapping.in_range
    flat = mapping.flat_index[keep]
    labels = motion[keep]
    static = np.bincount(flat[labels == MotionLabel.STATIC], minlength=v)
    moving = np.bincount(flat[labels == MotionLabel.MOVING], minlength=v)
    out = np.full(v, MotionLabel.IGNORE, dtype=np.uint8)
    out[static > moving] = MotionLabel.STATIC
    out[moving > static] = MotionLabel.MOVING
    return out
