"""
Evaluation metrics

- Segmentation: confusion counts, per-class IoU, mIoU over evaluated classes
- Odometry: ATE (no trajectory alignment), start-to-stop drift error and rate
- Loop closure: precision-recall sweep and maximum F1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateTrajectory, LengthMismatch, NoPositives
from .geometry import PoseSE3
from .kitti_io import MotionLabel

EVAL_CLASSES = (MotionLabel.STATIC, MotionLabel.MOVING)
DR_DEFINITION = "DR = 100 * DE / ground-truth path length"


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class TP/FP/FN indexed by class value (0 static, 1 moving)"""
    tp: tuple[int, ...] = (0, 0)
    fp: tuple[int, ...] = (0, 0)
    fn: tuple[int, ...] = (0, 0)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        """Support + operator for accumulation over scans"""
        return ConfusionCounts(
            tp=tuple(a + b for a, b in zip(self.tp, other.tp)),
            fp=tuple(a + b for a, b in zip(self.fp, other.fp)),
            fn=tuple(a + b for a, b in zip(self.fn, other.fn)),
        )

    @property
    def total(self) -> int:
        """Number of evaluated (non-ignore) points"""
        return sum(self.tp) + sum(self.fn)

    def row(self, cls: int) -> tuple[int, int, int]:
        return self.tp[cls], self.fp[cls], self.fn[cls]


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    """Confusion counts over Static/Moving; IGNORE truth points are skipped"""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {truth.size} labels")
    keep = truth != MotionLabel.IGNORE
    p, t = pred[keep], truth[keep]
    tp, fp, fn = [], [], []
    for cls in EVAL_CLASSES:
        hit_p, hit_t = p == cls, t == cls
        tp.append(int(np.sum(hit_p & hit_t)))
        fp.append(int(np.sum(hit_p & ~hit_t)))
        fn.append(int(np.sum(~hit_p & hit_t)))
    return ConfusionCounts(tp=tuple(tp), fp=tuple(fp), fn=tuple(fn))


def evaluate_sequence(preds: Iterable[np.ndarray], truths: Iterable[np.ndarray]) -> ConfusionCounts:
    total = ConfusionCounts()
    for pred, truth in zip(preds, truths, strict=True):
        total = total + confusion(pred, truth)
    return total


def iou(counts: ConfusionCounts, cls: int) -> float:
    """TP / (TP + FP + FN); 1.0 when the class never occurs in truth or prediction"""
    tp, fp, fn = counts.row(int(cls))
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def miou(counts: ConfusionCounts) -> float:
    """Mean IoU over classes with a non-zero denominator (1.0 if none)"""
    values = [iou(counts, c) for c in EVAL_CLASSES if sum(counts.row(int(c))) > 0]
    return float(np.mean(values)) if values else 1.0


def format_iou(value: float) -> str:
    """IoU as a percentage with one decimal, e.g. 0.749 -> '74.9'"""
    return f"{100.0 * value:.1f}"


@dataclass(frozen=True)
class TrajectoryPair:
    ground_truth: tuple[PoseSE3, ...]
    predicted: tuple[PoseSE3, ...]

    def __post_init__(self):
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        object.__setattr__(self, "predicted", tuple(self.predicted))
        if len(self.ground_truth) != len(self.predicted):
            raise LengthMismatch(
                f"{len(self.ground_truth)} ground-truth poses vs {len(self.predicted)} predicted"
            )
        if not self.ground_truth:
            raise DegenerateTrajectory("empty trajectory")

    def __len__(self) -> int:
        return len(self.ground_truth)

    def local_errors(self) -> np.ndarray:
        """(m, 3) translation of Q_i^-1 P_i per frame"""
        rq = np.stack([q.rotation for q in self.ground_truth])
        tq = np.stack([q.translation for q in self.ground_truth])
        tp = np.stack([p.translation for p in self.predicted])
        return np.einsum("nji,nj->ni", rq, tp - tq)


def ate(pair: TrajectoryPair) -> float:
    """RMS over frames of |trans(Q_i^-1 P_i)|, no alignment"""
    err = pair.local_errors()
    return float(math.sqrt(np.mean(np.sum(err * err, axis=1))))


@dataclass(frozen=True)
class DriftResult:
    de: float
    dr_percent: float
    path_length: float
    definition: str = DR_DEFINITION


def path_length(poses: Sequence[PoseSE3]) -> float:
    t = np.stack([p.translation for p in poses])
    return float(np.sum(np.linalg.norm(np.diff(t, axis=0), axis=1)))


def drift(pair: TrajectoryPair) -> DriftResult:
    """Start-to-stop drift error at the final frame and drift rate in percent"""
    if len(pair) < 2:
        raise DegenerateTrajectory("drift needs at least two poses")
    length = path_length(pair.ground_truth)
    if length == 0.0:
        raise DegenerateTrajectory("ground-truth path length is zero")
    de = float(np.linalg.norm(pair.local_errors()[-1]))
    return DriftResult(de=de, dr_percent=100.0 * de / length, path_length=length)


@dataclass(frozen=True)
class PRCurve:
    """Thresholds ascending; a pair counts as positive when score >= threshold"""
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    positives: int = 0

    def __len__(self) -> int:
        return len(self.thresholds)

    def f1(self) -> np.ndarray:
        p, r = self.precision, self.recall
        denom = p + r
        return np.where(denom > 0, 2.0 * p * r / np.where(denom > 0, denom, 1.0), 0.0)


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def pr_curve(scores: np.ndarray, truth: np.ndarray) -> PRCurve:
    """
    Sweep thresholds over the distinct score values

    Raises:
        LengthMismatch: scores and truth differ in length
        NoPositives: No true loop pair
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise LengthMismatch(f"{scores.size} scores vs {truth.size} labels")
    positives = int(truth.sum())
    if positives == 0:
        raise NoPositives("precision-recall needs at least one true pair")
    order = np.argsort(scores, kind="stable")
    s, t = scores[order], truth[order]
    tp_suffix = np.concatenate([np.cumsum(t[::-1])[::-1], [0]])
    thresholds = np.unique(s)
    start = np.searchsorted(s, thresholds, side="left")
    predicted = len(s) - start
    tp = tp_suffix[start]
    return PRCurve(
        thresholds=thresholds,
        precision=tp / predicted,
        recall=tp / positives,
        positives=positives,
    )


def f1_max(curve: PRCurve) -> float:
    return float(curve.f1().max()) if len(curve) else 0.0


def pr_points(curve: PRCurve) -> list[tuple[float, float]]:
    """(recall, precision) rows for two-column plot data"""
    return [(float(r), float(p)) for r, p in zip(curve.recall, curve.precision)]


@dataclass
class MosReport:
    """Per-sequence counts plus the totals used in the report table"""
    sequences: dict[str, ConfusionCounts] = field(default_factory=dict)

    def add(self, name: str, counts: ConfusionCounts):
        self.sequences[name] = self.sequences.get(name, ConfusionCounts()) + counts

    @property
    def total(self) -> ConfusionCounts:
        out = ConfusionCounts()
        for counts in self.sequences.values():
            out = out + counts
        return out

    def moving_iou(self) -> float:
        return iou(self.total, MotionLabel.MOVING)


REVISIT_RADIUS = 4.0


def loop_pair_truth(poses: Sequence[PoseSE3], pairs: Iterable[tuple[int, int]],
                    radius: float = REVISIT_RADIUS) -> np.ndarray:
    """True where the two frames of a pair lie within radius meters of each other"""
    return np.array([
        float(np.linalg.norm(poses[i].translation - poses[j].translation)) < radius for i, j in pairs
    ], dtype=bool)
