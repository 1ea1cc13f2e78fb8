"""
Global map aggregation and moving-point removal

Posed scans are moved into the world frame and concatenated without
deduplication; each map point remembers the position of its source scan in
the input sequence and its index within that scan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import LengthMismatch
from .geometry import PoseSE3, transform_points
from .kitti_io import MotionLabel, RawScan, write_predictions, write_scan

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlobalMap:
    points: np.ndarray        # (N, 3) world coordinates
    intensity: np.ndarray     # (N,)
    frames: np.ndarray        # (N,) position of the source scan in the input sequence
    source_index: np.ndarray  # (N,) point index inside the source scan
    labels: np.ndarray        # (N,) uint8 MotionLabel values

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, keep: np.ndarray) -> "GlobalMap":
        return GlobalMap(
            points=self.points[keep],
            intensity=self.intensity[keep],
            frames=self.frames[keep],
            source_index=self.source_index[keep],
            labels=self.labels[keep],
        )

    def moving_count(self) -> int:
        return int(np.sum(self.labels == MotionLabel.MOVING))

    @classmethod
    def empty(cls) -> "GlobalMap":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros(0, np.uint8))


def aggregate_map(scans: Sequence[RawScan], poses: Sequence[PoseSE3],
                  labels: Sequence[np.ndarray]) -> GlobalMap:
    """
    Transform every scan by its world pose and append its motion labels

    Raises:
        LengthMismatch: scans, poses and labels disagree in count, or a label
            array does not match its scan
    """
    if not len(scans) == len(poses) == len(labels):
        raise LengthMismatch(f"{len(scans)} scans, {len(poses)} poses, {len(labels)} label arrays")
    if not scans:
        return GlobalMap.empty()
    parts_xyz, parts_int, parts_frame, parts_idx, parts_lab = [], [], [], [], []
    for pos, (scan, pose, lab) in enumerate(zip(scans, poses, labels)):
        lab = np.asarray(lab, dtype=np.uint8)
        if lab.shape != (len(scan),):
            raise LengthMismatch(f"scan {pos}: {len(scan)} points but {lab.shape[0]} labels")
        parts_xyz.append(transform_points(scan.xyz, pose))
        parts_int.append(scan.intensity)
        parts_frame.append(np.full(len(scan), pos, dtype=np.int64))
        parts_idx.append(np.arange(len(scan), dtype=np.int64))
        parts_lab.append(lab)
    return GlobalMap(
        points=np.concatenate(parts_xyz),
        intensity=np.concatenate(parts_int),
        frames=np.concatenate(parts_frame),
        source_index=np.concatenate(parts_idx),
        labels=np.concatenate(parts_lab),
    )


def filter_moving(global_map: GlobalMap) -> GlobalMap:
    """Keep exactly the Static and Ignore points, order preserved"""
    return global_map.select(global_map.labels != MotionLabel.MOVING)


def residual_moving_count(filtered: GlobalMap, truth_labels: Sequence[np.ndarray]) -> int:
    """Number of truly moving points still present in the map"""
    if len(filtered) == 0:
        return 0
    count = 0
    for pos in np.unique(filtered.frames):
        sel = filtered.frames == pos
        truth = np.asarray(truth_labels[int(pos)])
        count += int(np.sum(truth[filtered.source_index[sel]] == MotionLabel.MOVING))
    return count


def voxel_downsample(global_map: GlobalMap, voxel_size: float) -> GlobalMap:
    """First point per cubic voxel, order preserved; voxel_size <= 0 returns the map unchanged"""
    if voxel_size <= 0 or len(global_map) == 0:
        return global_map
    cells = np.floor(global_map.points / voxel_size).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return global_map.select(np.sort(first))


def export_map(global_map: GlobalMap, path: Path) -> tuple[Path, Path]:
    """Write <path>.bin (x, y, z, intensity) and a sidecar <path>.label"""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    label_path = path.with_suffix(".label")
    points = np.concatenate([global_map.points, global_map.intensity[:, None]], axis=1)
    write_scan(bin_path, RawScan(points=points, frame_index=0))
    write_predictions(label_path, global_map.labels)
    logger.info("map exported: %s (%d points)", bin_path, len(global_map))
    return bin_path, label_path
