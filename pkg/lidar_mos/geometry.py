"""
Rigid-body transform algebra

PoseSE3 wraps a 4x4 homogeneous transform in double precision. Relative pose
chains follow the scan-aligned convention used across the package:

    chain[k] = T_k^{k-1}   (frame k coordinates -> frame k-1 coordinates)

chain[0] relates frame 0 to a virtual frame -1 (the world origin for
synthetic sequences) and is never used when composing between real frames.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import IndexOutOfRange, NonFiniteValue, NotOrthonormal, ShapeMismatch

if TYPE_CHECKING:
    from .kitti_io import RawScan

# Orthonormality tolerance for rotation blocks
ORTHO_TOLERANCE = 1e-9
_BOTTOM_ROW = np.array([0.0, 0.0, 0.0, 1.0])


def orthonormality_defect(rotation: np.ndarray) -> float:
    """Max-abs deviation of R^T R from I, plus |det(R) - 1|"""
    gram = rotation.T @ rotation - np.eye(3)
    return float(max(np.abs(gram).max(), abs(np.linalg.det(rotation) - 1.0)))


@dataclass(frozen=True)
class PoseSE3:
    """4x4 homogeneous rigid transform

    Bottom row is exactly (0, 0, 0, 1), the rotation block is orthonormal with
    det +1 (within ORTHO_TOLERANCE) and every entry is finite.
    """
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeMismatch(f"pose must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NonFiniteValue("pose contains non-finite entries")
        if not np.array_equal(m[3], _BOTTOM_ROW):
            raise ShapeMismatch(f"pose bottom row must be (0,0,0,1), got {m[3]}")
        defect = orthonormality_defect(m[:3, :3])
        if defect > ORTHO_TOLERANCE:
            raise NotOrthonormal(f"rotation block is not orthonormal (defect {defect:.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: Sequence[float]) -> "PoseSE3":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def from_translation(cls, translation: Sequence[float]) -> "PoseSE3":
        return cls.from_rt(np.eye(3), translation)

    @classmethod
    def rotation_z(cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "PoseSE3":
        """Yaw rotation about +z followed by a translation"""
        c, s = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls.from_rt(rotation, translation)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.matrix[1, 0], self.matrix[0, 0]))

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def allclose(self, other: "PoseSE3", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))


def _finalize(m: np.ndarray) -> PoseSE3:
    """Pin the bottom row; re-project the rotation only once drift is measurable"""
    m[3] = _BOTTOM_ROW
    if orthonormality_defect(m[:3, :3]) > ORTHO_TOLERANCE / 10:
        m[:3, :3] = nearest_rotation(m[:3, :3])
    return PoseSE3(m)


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """A·B: apply B first, then A"""
    return _finalize(a.matrix @ b.matrix)


def invert_pose(pose: PoseSE3) -> PoseSE3:
    """Closed-form rigid inverse (R^T, -R^T t)"""
    rt = pose.rotation.T
    m = np.eye(4)
    m[:3, :3] = rt
    m[:3, 3] = -rt @ pose.translation
    return PoseSE3(m)


def compose_relative(rel_chain: Sequence[PoseSE3], m: int, n: int) -> PoseSE3:
    """
    Transform taking frame-m coordinates into frame-n coordinates

    For n <= m this is the ordered product chain[n+1] · chain[n+2] · ... · chain[m];
    m == n gives the identity. For n > m the inverse of the forward product is
    returned, so composing both directions yields the identity.

    Args:
        rel_chain: Scan-aligned relative poses, rel_chain[k] = T_k^{k-1}
        m: Source frame index
        n: Target frame index

    Raises:
        IndexOutOfRange: If either index falls outside the chain
    """
    size = len(rel_chain)
    for name, idx in (("m", m), ("n", n)):
        if not 0 <= idx < size:
            raise IndexOutOfRange(f"{name}={idx} outside chain of length {size}")
    if n > m:
        return invert_pose(compose_relative(rel_chain, n, m))
    result = np.eye(4)
    for k in range(n + 1, m + 1):
        result = result @ rel_chain[k].matrix
    return _finalize(result)


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Closest proper rotation in Frobenius norm (polar decomposition via SVD)"""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def transform_points(xyz: np.ndarray, pose: PoseSE3) -> np.ndarray:
    """Apply a pose to an (N, 3) array of points"""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return xyz @ pose.rotation.T + pose.translation


def transform_scan(scan: RawScan, pose: PoseSE3) -> RawScan:
    """Re-express every point of a scan through a pose; intensity and order kept"""
    points = scan.points.copy()
    points[:, :3] = transform_points(scan.points[:, :3], pose)
    return replace(scan, points=points)


def relative_from_world(world_poses: Sequence[PoseSE3]) -> list[PoseSE3]:
    """Scan-aligned relative chain: rel[0] = W_0, rel[k] = inv(W_{k-1}) · W_k"""
    rel: list[PoseSE3] = []
    for k, pose in enumerate(world_poses):
        rel.append(pose if k == 0 else compose(invert_pose(world_poses[k - 1]), pose))
    return rel


def world_from_relative(rel_chain: Sequence[PoseSE3]) -> list[PoseSE3]:
    """Inverse of relative_from_world: W_k = rel[0] · rel[1] · ... · rel[k]"""
    world: list[PoseSE3] = []
    acc = np.eye(4)
    for pose in rel_chain:
        pose_k = _finalize(acc @ pose.matrix)
        acc = pose_k.matrix
        world.append(pose_k)
    return world


def random_pose(rng: np.random.Generator, translation_scale: float = 10.0) -> PoseSE3:
    """Uniformly random rotation (QR of a Gaussian matrix) and Gaussian translation"""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return PoseSE3.from_rt(q, rng.standard_normal(3) * translation_scale)
