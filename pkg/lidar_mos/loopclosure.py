"""
Scan-context place recognition

A scan is summarised as a rings x sectors polar grid of mean point height.
Retrieval uses the rotation-invariant ring key (per-ring mean of occupied
cells) in a k-d tree; verification compares sector columns by cosine
similarity under every cyclic sector shift.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cylvoxel import to_cylindrical
from .errors import ShapeMismatch
from .kitti_io import MotionLabel, RawScan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoopConfig:
    rings: int = 20
    sectors: int = 60
    rho_max: float = 40.0
    candidates: int = 5
    time_gap_min: float = 30.0
    accept_threshold: float = 0.9
    keyframe_every: int = 5
    mask_moving: bool = True

    def __post_init__(self):
        if self.rings < 1 or self.sectors < 1:
            raise ValueError(f"rings and sectors must be >= 1, got {self.rings}x{self.sectors}")
        if not self.rho_max > 0 or self.candidates < 1 or self.keyframe_every < 1:
            raise ValueError("rho_max, candidates and keyframe_every must be positive")
        if self.time_gap_min < 0:
            raise ValueError(f"time_gap_min must be >= 0, got {self.time_gap_min}")


@dataclass(frozen=True)
class ScanContextDesc:
    grid: np.ndarray  # (R, S) mean height, 0 where empty
    mask: np.ndarray  # (R, S) True where the cell holds points
    frame_index: int = 0
    timestamp: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def ring_key(self) -> np.ndarray:
        """Per-ring mean of occupied cells (0 for empty rings)"""
        counts = self.mask.sum(axis=1)
        sums = np.where(self.mask, self.grid, 0.0).sum(axis=1)
        return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)

    def rotated(self, sectors: int) -> "ScanContextDesc":
        """Descriptor of the same scan yawed by sectors * 2pi/S"""
        return ScanContextDesc(
            grid=np.roll(self.grid, sectors, axis=1),
            mask=np.roll(self.mask, sectors, axis=1),
            frame_index=self.frame_index,
            timestamp=self.timestamp,
        )


def make_descriptor(scan: RawScan, rings: int, sectors: int, rho_max: float,
                    motion_mask: np.ndarray | None = None, timestamp: float = 0.0) -> ScanContextDesc:
    """
    Mean height per (ring, sector) cell

    Rings split rho over [0, rho_max), sectors split theta over [-pi, pi).
    Points labelled MOVING in motion_mask are left out.
    """
    if rings < 1 or sectors < 1:
        raise ValueError(f"rings and sectors must be >= 1, got {rings}x{sectors}")
    cyl = to_cylindrical(scan.xyz)
    keep = cyl[:, 0] < rho_max
    if motion_mask is not None:
        motion_mask = np.asarray(motion_mask)
        if motion_mask.shape != (len(scan),):
            raise ShapeMismatch(f"motion mask has {motion_mask.shape}, scan has {len(scan)} points")
        keep &= motion_mask != MotionLabel.MOVING
    cyl = cyl[keep]
    ring = np.minimum(np.floor(cyl[:, 0] / (rho_max / rings)).astype(np.int64), rings - 1)
    sector = np.clip(np.floor((cyl[:, 1] + math.pi) / (2.0 * math.pi / sectors)).astype(np.int64), 0, sectors - 1)
    flat = ring * sectors + sector
    counts = np.bincount(flat, minlength=rings * sectors).reshape(rings, sectors)
    sums = np.bincount(flat, weights=cyl[:, 2], minlength=rings * sectors).reshape(rings, sectors)
    mask = counts > 0
    grid = np.where(mask, sums / np.maximum(counts, 1), 0.0)
    return ScanContextDesc(grid=grid, mask=mask, frame_index=scan.frame_index, timestamp=float(timestamp))


@dataclass(frozen=True)
class Candidate:
    frame_index: int
    distance: float


class KeyframeDB:
    """
    Append-only keyframe store with a k-d tree over ring keys

    Frame indices must strictly increase and timestamps must not decrease, so
    the frames eligible for a query always form a prefix of the store.
    """

    def __init__(self):
        self._descs: list[ScanContextDesc] = []
        self._keys: list[np.ndarray] = []
        self._times: list[float] = []
        self._tree: cKDTree | None = None
        self._tree_size = 0
        self._by_frame: dict[int, ScanContextDesc] = {}

    def __len__(self) -> int:
        return len(self._descs)

    def append(self, desc: ScanContextDesc) -> None:
        if self._descs:
            last = self._descs[-1]
            if desc.frame_index <= last.frame_index:
                raise ValueError(f"frame {desc.frame_index} after {last.frame_index}: indices must increase")
            if desc.timestamp < last.timestamp:
                raise ValueError("keyframe timestamps must not decrease")
        self._descs.append(desc)
        self._by_frame[desc.frame_index] = desc
        self._keys.append(desc.ring_key())
        self._times.append(desc.timestamp)

    def get(self, frame_index: int) -> ScanContextDesc:
        return self._by_frame[frame_index]

    def _tree_for(self, count: int) -> cKDTree:
        if self._tree is None or self._tree_size != count:
            self._tree = cKDTree(np.stack(self._keys[:count]))
            self._tree_size = count
        return self._tree

    def query(self, query: ScanContextDesc, k: int, time_gap_min: float) -> list[Candidate]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        count = int(np.searchsorted(np.asarray(self._times), query.timestamp - time_gap_min, side="right"))
        if count == 0:
            return []
        tree = self._tree_for(count)
        dist, idx = tree.query(query.ring_key(), k=min(k, count))
        dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
        found = [Candidate(frame_index=self._descs[int(i)].frame_index, distance=float(d))
                 for d, i in zip(dist, idx)]
        return sorted(found, key=lambda c: (c.distance, c.frame_index))


def query_candidates(db: KeyframeDB, query: ScanContextDesc, k: int, time_gap_min: float) -> list[Candidate]:
    """k nearest eligible keyframes by ring-key distance, ascending"""
    return db.query(query, k, time_gap_min)


def column_similarity(a: ScanContextDesc | np.ndarray, b: ScanContextDesc | np.ndarray,
                      mask_a: np.ndarray | None = None, mask_b: np.ndarray | None = None) -> float:
    """Mean cosine over columns occupied in both grids with non-zero norms"""
    if isinstance(a, ScanContextDesc):
        a, mask_a = a.grid, a.mask
    if isinstance(b, ScanContextDesc):
        b, mask_b = b.grid, b.mask
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    valid = (na > 0) & (nb > 0)
    if mask_a is not None:
        valid &= mask_a.any(axis=0)
    if mask_b is not None:
        valid &= mask_b.any(axis=0)
    if not valid.any():
        return 0.0
    cos = np.sum(a[:, valid] * b[:, valid], axis=0) / (na[valid] * nb[valid])
    return float(np.mean(cos))


@dataclass(frozen=True)
class LoopDecision:
    accepted: bool
    shift: int
    similarity: float


def verify_loop(query: ScanContextDesc, candidate: ScanContextDesc, accept_threshold: float) -> LoopDecision:
    """
    Best cyclic sector shift s such that rolling the query by s matches the candidate

    Raises:
        ShapeMismatch: Descriptors differ in (R, S)
    """
    if query.shape != candidate.shape:
        raise ShapeMismatch(f"descriptor shapes differ: {query.shape} vs {candidate.shape}")
    sectors = query.shape[1]
    scores = [column_similarity(query.rotated(s), candidate) for s in range(sectors)]
    shift = int(np.argmax(scores))
    similarity = scores[shift]
    return LoopDecision(accepted=similarity >= accept_threshold, shift=shift, similarity=similarity)


def shift_to_yaw(shift: int, sectors: int) -> float:
    """Yaw (radians, wrapped to [-pi, pi)) taking query-frame points into the match frame"""
    yaw = shift * 2.0 * math.pi / sectors
    return (yaw + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class LoopMatch:
    query_frame: int
    match_frame: int
    shift: int
    similarity: float
    accepted: bool

    def as_row(self) -> dict:
        return {
            "query_frame": self.query_frame,
            "match_frame": self.match_frame,
            "shift": self.shift,
            "similarity": self.similarity,
            "accepted": self.accepted,
        }


@dataclass
class LoopClosureDetector:
    """Streams scans through descriptor, retrieval, verification and keyframe admission"""
    config: LoopConfig = field(default_factory=LoopConfig)
    db: KeyframeDB = field(default_factory=KeyframeDB)
    matches: list[LoopMatch] = field(default_factory=list)

    def process(self, scan: RawScan, timestamp: float, motion: np.ndarray | None = None) -> LoopMatch | None:
        cfg = self.config
        mask = motion if (cfg.mask_moving and motion is not None) else None
        desc = make_descriptor(scan, cfg.rings, cfg.sectors, cfg.rho_max, mask, timestamp)
        best: LoopMatch | None = None
        for cand in self.db.query(desc, cfg.candidates, cfg.time_gap_min):
            decision = verify_loop(desc, self.db.get(cand.frame_index), cfg.accept_threshold)
            if best is None or decision.similarity > best.similarity:
                best = LoopMatch(desc.frame_index, cand.frame_index, decision.shift,
                                 decision.similarity, decision.accepted)
        if best is not None:
            self.matches.append(best)
            if best.accepted:
                logger.debug("loop %d -> %d (similarity %.3f)", best.query_frame, best.match_frame, best.similarity)
        if desc.frame_index % cfg.keyframe_every == 0:
            self.db.append(desc)
        return best

    def accepted(self) -> list[LoopMatch]:
        return [m for m in self.matches if m.accepted]


def export_pose_graph(matches: list[LoopMatch], sectors: int) -> list[tuple[int, int, float]]:
    """(i, j, relative_yaw) for every accepted loop"""
    return [(m.query_frame, m.match_frame, shift_to_yaw(m.shift, sectors)) for m in matches if m.accepted]
