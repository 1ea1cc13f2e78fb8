"""
KITTI / SemanticKITTI on-disk formats

- `.bin` scans: little-endian float32 quadruples (x, y, z, intensity) per point
- `.label` files: little-endian uint32 per point, lower 16 bits semantic class,
  upper 16 bits instance id
- `poses.txt`: 12 decimals per line, row-major 3x4
- `calib.txt`: optional `Tr:` line with 12 decimals (LiDAR -> camera)
- predictions mirror `.label` with motion values {0, 1, 255} in the lower 16 bits
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, LengthMismatch, MalformedFile, MosIOError, NonFiniteValue
from .geometry import (
    ORTHO_TOLERANCE,
    PoseSE3,
    compose,
    invert_pose,
    nearest_rotation,
    orthonormality_defect,
)

logger = logging.getLogger(__name__)

_SCAN_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u4")

# SemanticKITTI "moving-*" semantic ids (moving car ... moving other-vehicle)
DEFAULT_MOTION_CLASS_IDS = frozenset(range(252, 260))
# "unlabeled" and "outlier"
DEFAULT_IGNORE_CLASS_IDS = frozenset({0, 1})

# Standard MOS split; sequence 08 is held out for validation
DEFAULT_SPLIT = {
    "train": ("00", "01", "02", "03", "04", "05", "06", "07", "09", "10"),
    "valid": ("08",),
}


class MotionLabel(IntEnum):
    """Per-point motion class; values are the serialized codes"""
    STATIC = 0
    MOVING = 1
    IGNORE = 255


@dataclass(frozen=True)
class RawScan:
    """One LiDAR sweep: (N, 4) float64 array of x, y, z (meters) and intensity"""
    points: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(points)):
            raise NonFiniteValue(f"scan {self.frame_index} contains non-finite values")
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def select(self, mask: np.ndarray) -> "RawScan":
        return RawScan(points=self.points[mask], frame_index=self.frame_index)


@dataclass(frozen=True)
class LabelSet:
    """Packed 32-bit labels, one per point"""
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.uint32).reshape(-1))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def semantic(self) -> np.ndarray:
        return (self.labels & 0xFFFF).astype(np.uint16)

    @property
    def instance(self) -> np.ndarray:
        return (self.labels >> 16).astype(np.uint16)

    @classmethod
    def from_parts(cls, semantic: np.ndarray, instance: np.ndarray | None = None) -> "LabelSet":
        semantic = np.asarray(semantic, dtype=np.uint32)
        instance = np.zeros_like(semantic) if instance is None else np.asarray(instance, dtype=np.uint32)
        return cls((instance << 16) | (semantic & 0xFFFF))


@dataclass(frozen=True)
class SequenceConfig:
    """Where a sequence lives on disk and how semantic ids map to motion classes"""
    scan_dir: Path
    label_dir: Path
    pose_file: Path
    motion_class_ids: frozenset[int] = DEFAULT_MOTION_CLASS_IDS
    ignore_class_ids: frozenset[int] = DEFAULT_IGNORE_CLASS_IDS
    calib_file: Path | None = None

    def __post_init__(self):
        overlap = set(self.motion_class_ids) & set(self.ignore_class_ids)
        if overlap:
            raise ConfigError(f"class ids both moving and ignored: {sorted(overlap)}")


@dataclass(frozen=True)
class SequenceLayout:
    """
    Directory layout of one sequence

        <root>/velodyne/000000.bin
        <root>/labels/000000.label
        <root>/predictions/000000.label
        <root>/poses.txt
        <root>/times.txt
        <root>/calib.txt   (optional)
    """
    root: Path
    predictions_name: str = "predictions"

    @property
    def scan_dir(self) -> Path:
        return self.root / "velodyne"

    @property
    def label_dir(self) -> Path:
        return self.root / "labels"

    @property
    def prediction_dir(self) -> Path:
        return self.root / self.predictions_name

    @property
    def pose_file(self) -> Path:
        return self.root / "poses.txt"

    @property
    def times_file(self) -> Path:
        return self.root / "times.txt"

    @property
    def calib_file(self) -> Path:
        return self.root / "calib.txt"

    def scan_path(self, frame: int) -> Path:
        return self.scan_dir / f"{frame:06d}.bin"

    def label_path(self, frame: int) -> Path:
        return self.label_dir / f"{frame:06d}.label"

    def frame_count(self) -> int:
        if not self.scan_dir.is_dir():
            raise MosIOError(f"scan directory not found: {self.scan_dir}")
        return sum(1 for _ in self.scan_dir.glob("*.bin"))

    def sequence_config(self, motion_class_ids: Iterable[int] = DEFAULT_MOTION_CLASS_IDS,
                        ignore_class_ids: Iterable[int] = DEFAULT_IGNORE_CLASS_IDS) -> SequenceConfig:
        return SequenceConfig(
            scan_dir=self.scan_dir,
            label_dir=self.label_dir,
            pose_file=self.pose_file,
            motion_class_ids=frozenset(motion_class_ids),
            ignore_class_ids=frozenset(ignore_class_ids),
            calib_file=self.calib_file if self.calib_file.exists() else None,
        )


# === Raw byte access ===

def read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise MosIOError(f"cannot read {path}: {e}") from e


def write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise MosIOError(f"cannot write {path}: {e}") from e


def read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise MosIOError(f"cannot read {path}: {e}") from e


# === Scans ===

def read_scan(path: Path, frame_index: int = 0) -> RawScan:
    """
    Read a `.bin` scan

    Raises:
        MalformedFile: Byte length not divisible by 16
        NonFiniteValue: Any coordinate or intensity is NaN/inf
        MosIOError: File cannot be read
    """
    data = read_bytes(path)
    if len(data) % 16:
        raise MalformedFile(f"{path}: {len(data)} bytes is not a multiple of 16")
    points = np.frombuffer(data, dtype=_SCAN_DTYPE).reshape(-1, 4)
    if not np.all(np.isfinite(points)):
        raise NonFiniteValue(f"{path}: scan contains non-finite values")
    return RawScan(points=points.astype(np.float64), frame_index=frame_index)


def write_scan(path: Path, scan: RawScan) -> None:
    write_bytes(path, scan.points.astype(_SCAN_DTYPE).tobytes())


# === Labels ===

def read_labels(path: Path) -> LabelSet:
    """Read a `.label` file (little-endian uint32 per point)"""
    data = read_bytes(path)
    if len(data) % 4:
        raise MalformedFile(f"{path}: {len(data)} bytes is not a multiple of 4")
    return LabelSet(np.frombuffer(data, dtype=_LABEL_DTYPE).astype(np.uint32))


def write_labels(path: Path, labels: LabelSet) -> None:
    write_bytes(path, labels.labels.astype(_LABEL_DTYPE).tobytes())


def map_semantic_to_motion(labels: LabelSet, cfg: SequenceConfig) -> np.ndarray:
    """Pointwise semantic id -> MotionLabel code (uint8 array, same length)"""
    semantic = labels.semantic
    out = np.full(semantic.shape, MotionLabel.STATIC, dtype=np.uint8)
    if cfg.motion_class_ids:
        out[np.isin(semantic, np.fromiter(cfg.motion_class_ids, dtype=np.int64))] = MotionLabel.MOVING
    if cfg.ignore_class_ids:
        out[np.isin(semantic, np.fromiter(cfg.ignore_class_ids, dtype=np.int64))] = MotionLabel.IGNORE
    return out


def write_predictions(path: Path, motion: np.ndarray) -> None:
    """Predicted motion labels in `.label` layout (value in the lower 16 bits)"""
    motion = np.asarray(motion, dtype=np.uint32)
    write_bytes(path, (motion & 0xFFFF).astype(_LABEL_DTYPE).tobytes())


def read_predictions(path: Path) -> np.ndarray:
    values = read_labels(path).semantic
    valid = np.isin(values, [m.value for m in MotionLabel])
    if not np.all(valid):
        raise MalformedFile(f"{path}: unexpected motion codes {np.unique(values[~valid])[:5]}")
    return values.astype(np.uint8)


# === Poses and calibration ===

def _parse_matrix_line(tokens: Sequence[str], where: str) -> np.ndarray:
    if len(tokens) != 12:
        raise MalformedFile(f"{where}: expected 12 numbers, got {len(tokens)}")
    try:
        values = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as e:
        raise MalformedFile(f"{where}: {e}") from e
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{where}: non-finite pose entry")
    m = np.eye(4)
    m[:3, :] = values.reshape(3, 4)
    return m


def _to_pose(m: np.ndarray) -> PoseSE3:
    if orthonormality_defect(m[:3, :3]) > ORTHO_TOLERANCE:
        m[:3, :3] = nearest_rotation(m[:3, :3])
    return PoseSE3(m)


def read_poses(path: Path, calib_path: Path | None = None) -> list[PoseSE3]:
    """
    Read a KITTI pose file into a list of PoseSE3

    Rotation blocks whose orthonormality defect exceeds the pose tolerance are
    replaced by their nearest rotation (polar decomposition). When a calibration
    file is given, each camera-frame pose P is re-expressed in the LiDAR frame as
    Tr^-1 · P · Tr; without one the poses are taken as LiDAR poses directly.
    """
    poses = []
    for lineno, line in enumerate(read_text(path).splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        poses.append(_to_pose(_parse_matrix_line(tokens, f"{path}:{lineno}")))
    if calib_path is not None:
        poses = apply_calibration(poses, read_calib(calib_path))
    return poses


def write_poses(path: Path, poses: Sequence[PoseSE3]) -> None:
    lines = [" ".join(repr(float(v)) for v in p.matrix[:3, :].reshape(-1)) for p in poses]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    except OSError as e:
        raise MosIOError(f"cannot write {path}: {e}") from e


def read_calib(path: Path) -> PoseSE3:
    """Read the `Tr:` transform of a KITTI calib file"""
    for line in read_text(path).splitlines():
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            return _to_pose(_parse_matrix_line(rest.split(), f"{path}:Tr"))
    raise MalformedFile(f"{path}: no 'Tr:' line")


def apply_calibration(poses: Sequence[PoseSE3], tr: PoseSE3) -> list[PoseSE3]:
    tr_inv = invert_pose(tr)
    return [compose(compose(tr_inv, p), tr) for p in poses]


def read_times(path: Path) -> np.ndarray:
    """One timestamp (seconds) per line"""
    values = [float(t) for t in read_text(path).split()]
    times = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(times)):
        raise NonFiniteValue(f"{path}: non-finite timestamp")
    return times


def write_times(path: Path, times: Sequence[float]) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("".join(f"{t!r}\n" for t in map(float, times)), encoding="utf-8")
    except OSError as e:
        raise MosIOError(f"cannot write {path}: {e}") from e


# === Sequence access ===

@dataclass
class SequenceData:
    """Everything one sequence provides, loaded eagerly"""
    scans: list[RawScan]
    poses: list[PoseSE3]
    motion: list[np.ndarray] | None = None
    times: np.ndarray | None = None
    semantic: list[LabelSet] = field(default_factory=list)


def load_sequence(layout: SequenceLayout, cfg: SequenceConfig | None = None,
                  with_labels: bool = True) -> SequenceData:
    """Load scans, poses and (when present) labels of one sequence"""
    cfg = cfg or layout.sequence_config()
    count = layout.frame_count()
    scans = [read_scan(layout.scan_path(i), frame_index=i) for i in range(count)]
    poses = read_poses(cfg.pose_file, cfg.calib_file)
    if len(poses) != count:
        raise LengthMismatch(f"{layout.root}: {count} scans but {len(poses)} poses")

    times = None
    if layout.times_file.exists():
        times = read_times(layout.times_file)
        if len(times) != count:
            raise LengthMismatch(f"{layout.root}: {count} scans but {len(times)} timestamps")

    data = SequenceData(scans=scans, poses=poses, times=times)
    if with_labels and layout.label_dir.is_dir():
        data.semantic = [read_labels(layout.label_path(i)) for i in range(count)]
        for scan, labels in zip(scans, data.semantic):
            if len(labels) != len(scan):
                raise LengthMismatch(
                    f"frame {scan.frame_index}: {len(scan)} points but {len(labels)} labels"
                )
        data.motion = [map_semantic_to_motion(labels, cfg) for labels in data.semantic]
    logger.debug("loaded %d frames from %s", count, layout.root)
    return data


def frame_times(data: SequenceData, frame_rate: float) -> np.ndarray:
    """Timestamps of a sequence, synthesized at a fixed rate when times.txt is missing"""
    if data.times is not None:
        return data.times
    if not (frame_rate > 0 and math.isfinite(frame_rate)):
        raise ValueError(f"frame_rate must be positive, got {frame_rate}")
    return np.arange(len(data.scans), dtype=np.float64) / frame_rate
