"""
Optimizer and training loop

Adam with bias correction over a LayerParams registry, sample construction
from labelled sequences, and the epoch loop that reports mean losses plus
moving-class IoU on the training split.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cylvoxel import CylindricalGridSpec, assign_voxels, voxel_majority_labels
from .errors import EmptyDataset, NonFiniteGradient
from .evaluation import ConfusionCounts, confusion, iou
from .geometry import PoseSE3
from .kitti_io import MotionLabel, RawScan
from .loss import LossConfig, has_targets, total_loss
from .net import LayerParams, MosModel
from .report.tracker import RunningLoss
from .residual import ResidualStack, build_residual_stack

logger = logging.getLogger(__name__)

DEFAULT_WEIGHT_CLAMP = (0.1, 10.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle: bool = True
    seed: int = 0


@dataclass
class OptimizerState:
    """Adam moments per parameter name"""
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: LayerParams, cfg: TrainConfig | None = None) -> "OptimizerState":
        cfg = cfg or TrainConfig()
        state = cls(learning_rate=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
        for name, param in params.items():
            state.first[name] = np.zeros_like(param.value)
            state.second[name] = np.zeros_like(param.value)
        return state


def adam_step(params: LayerParams, state: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update in place; returns the same state"""
    for name, param in params.items():
        if not np.all(np.isfinite(param.grad)):
            raise NonFiniteGradient(f"gradient of {name} is not finite")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, param in params.items():
        m = state.first.setdefault(name, np.zeros_like(param.value))
        v = state.second.setdefault(name, np.zeros_like(param.value))
        g = param.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        param.value -= update.astype(param.value.dtype)
    return state


@dataclass(frozen=True)
class TrainSample:
    stack: ResidualStack
    point_targets: np.ndarray  # (N,) motion labels of the current scan
    voxel_targets: np.ndarray  # (V,) majority-vote voxel labels
    name: str = ""

    @property
    def labelled(self) -> bool:
        """At least one point or voxel target is not IGNORE"""
        return has_targets(self.point_targets) or has_targets(self.voxel_targets)


def build_samples(scans: Sequence[RawScan], rel_poses: Sequence[PoseSE3], motion: Sequence[np.ndarray],
                  spec: CylindricalGridSpec, k: int, name: str = "") -> list[TrainSample]:
    """One sample per frame t >= k: residual stack, point targets, voxel targets"""
    samples = []
    for t in range(k, len(scans)):
        stack = build_residual_stack(scans, rel_poses, t, k)
        mapping = assign_voxels(stack.current, spec)
        samples.append(TrainSample(
            stack=stack,
            point_targets=np.asarray(motion[t], dtype=np.uint8),
            voxel_targets=voxel_majority_labels(motion[t], mapping),
            name=f"{name}:{t:06d}" if name else f"{t:06d}",
        ))
    return samples


def inverse_frequency_weights(samples: Sequence[TrainSample], num_classes: int = 2,
                              clamp: tuple[float, float] = DEFAULT_WEIGHT_CLAMP) -> tuple[float, ...]:
    """w_c = total / (K * n_c) over non-ignore point targets, clamped"""
    counts = np.zeros(num_classes, dtype=np.float64)
    for sample in samples:
        t = sample.point_targets[sample.point_targets != MotionLabel.IGNORE]
        counts += np.bincount(t, minlength=num_classes)[:num_classes]
    total = counts.sum()
    lo, hi = clamp
    weights = np.where(counts > 0, total / (num_classes * np.maximum(counts, 1.0)), hi)
    return tuple(float(w) for w in np.clip(weights, lo, hi))


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    total_loss: float
    voxel_loss: float
    point_loss: float
    moving_iou: float

    def as_row(self) -> dict:
        return {
            "epoch": self.epoch,
            "total_loss": self.total_loss,
            "voxel_loss": self.voxel_loss,
            "point_loss": self.point_loss,
            "moving_iou": self.moving_iou,
        }


def train_epoch(samples: Sequence[TrainSample], model: MosModel, optimizer: OptimizerState,
                loss_cfg: LossConfig, rng: np.random.Generator | None = None, epoch: int = 0) -> EpochMetrics:
    """
    One pass over the samples, one Adam step per sample

    Samples whose targets are all IGNORE are skipped.

    Args:
        rng: Shuffles the visiting order when given; fixed order otherwise

    Raises:
        EmptyDataset: No samples, or none with a labelled target
    """
    if not samples:
        raise EmptyDataset("training split has no samples")
    if not any(s.labelled for s in samples):
        raise EmptyDataset(f"all {len(samples)} samples have only IGNORE targets")
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    running = RunningLoss()
    counts = ConfusionCounts()
    for i in order:
        sample = samples[int(i)]
        if not sample.labelled:
            logger.debug("skipping %s: no labelled targets", sample.name)
            continue
        model.params.zero_grad()
        (voxel_logits, point_logits), cache = model.forward(sample.stack)
        result = total_loss(voxel_logits, sample.voxel_targets, point_logits, sample.point_targets, loss_cfg)
        model.backward((result.grad_voxel_logits, result.grad_point_logits), cache)
        adam_step(model.params, optimizer)
        running += RunningLoss(total=result.total, voxel=result.voxel, point=result.point, count=1)
        pred = np.argmax(point_logits, axis=1).astype(np.uint8)
        counts = counts + confusion(pred, sample.point_targets)
    mean = running.mean()
    return EpochMetrics(
        epoch=epoch,
        total_loss=mean.total,
        voxel_loss=mean.voxel,
        point_loss=mean.point,
        moving_iou=iou(counts, MotionLabel.MOVING),
    )


def fit(samples: Sequence[TrainSample], model: MosModel, train_cfg: TrainConfig, loss_cfg: LossConfig,
        on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
    """Multi-epoch training; shuffling draws from one generator seeded by train_cfg.seed"""
    optimizer = OptimizerState.for_params(model.params, train_cfg)
    rng = np.random.default_rng(train_cfg.seed) if train_cfg.shuffle else None
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        metrics = train_epoch(samples, model, optimizer, loss_cfg, rng=rng, epoch=epoch)
        if not math.isfinite(metrics.total_loss):
            raise NonFiniteGradient(f"loss diverged at epoch {epoch}")
        logger.info("epoch %d: loss=%.5f moving_iou=%.4f", epoch, metrics.total_loss, metrics.moving_iou)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return history
