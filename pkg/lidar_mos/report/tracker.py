"""
Loss accumulation

RunningLoss sums per-sample losses; EpochTracker keeps the per-epoch history
and answers simple questions about it (best epoch, monotone prefix).
"""

from dataclasses import dataclass, field
from typing import Any


@dataclass
class RunningLoss:
    """Summed losses over `count` samples"""
    total: float = 0.0
    voxel: float = 0.0
    point: float = 0.0
    count: int = 0

    def __add__(self, other: "RunningLoss") -> "RunningLoss":
        """Support + operator for accumulation"""
        return RunningLoss(
            total=self.total + other.total,
            voxel=self.voxel + other.voxel,
            point=self.point + other.point,
            count=self.count + other.count,
        )

    def is_empty(self) -> bool:
        return self.count == 0

    def mean(self) -> "RunningLoss":
        """Per-sample averages (count preserved)"""
        if self.is_empty():
            return RunningLoss()
        n = float(self.count)
        return RunningLoss(total=self.total / n, voxel=self.voxel / n, point=self.point / n, count=self.count)


@dataclass
class EpochTracker:
    """History of epoch metric objects exposing total_loss / moving_iou"""
    history: list[Any] = field(default_factory=list)

    def record(self, metrics: Any) -> None:
        self.history.append(metrics)

    def __len__(self) -> int:
        return len(self.history)

    def best(self) -> Any | None:
        """Epoch with the highest moving IoU (earliest on ties)"""
        if not self.history:
            return None
        return max(self.history, key=lambda m: (m.moving_iou, -m.epoch))

    def losses(self) -> list[float]:
        return [m.total_loss for m in self.history]

    def strictly_decreasing(self, first: int | None = None) -> bool:
        values = self.losses()[:first] if first else self.losses()
        return all(b < a for a, b in zip(values, values[1:]))
