"""
Training objective

    total = alpha * L_point + beta * L_voxel
    L_voxel = weighted cross-entropy + Lovasz-softmax on voxel logits
    L_point = weighted cross-entropy on point logits

Every loss returns its value together with the gradient w.r.t. its input.
Elements labelled IGNORE (255) contribute neither loss nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import EmptyBatch, ShapeMismatch
from .kitti_io import MotionLabel

IGNORE = int(MotionLabel.IGNORE)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    class_weights: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if not self.class_weights or min(self.class_weights) <= 0:
            raise ValueError(f"class weights must be positive, got {self.class_weights}")

    @property
    def weights(self) -> np.ndarray:
        return np.asarray(self.class_weights, dtype=np.float64)


@dataclass(frozen=True)
class LossResult:
    total: float
    voxel: float
    point: float
    voxel_ce: float
    voxel_lovasz: float
    grad_voxel_logits: np.ndarray  # (K, H, W, L)
    grad_point_logits: np.ndarray  # (N, K)


def _valid_targets(targets: np.ndarray, num_classes: int) -> np.ndarray:
    targets = np.asarray(targets).astype(np.int64)
    valid = targets != IGNORE
    if np.any((targets[valid] < 0) | (targets[valid] >= num_classes)):
        raise ShapeMismatch(f"targets outside 0..{num_classes - 1} and IGNORE")
    return valid


def has_targets(targets: np.ndarray) -> bool:
    """True when at least one target is not IGNORE"""
    return bool(np.any(np.asarray(targets) != IGNORE))


def weighted_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                           class_weights: np.ndarray) -> tuple[float, np.ndarray]:
    """
    mean over non-IGNORE rows of w[t] * -log softmax(logits)[t]

    Args:
        logits: (N, K)
        targets: (N,) in 0..K-1 or IGNORE
        class_weights: (K,)

    Returns:
        (loss, gradient w.r.t. logits)

    Raises:
        EmptyBatch: Every target is IGNORE
    """
    logits = np.asarray(logits, dtype=np.float64)
    weights = np.asarray(class_weights, dtype=np.float64)
    if logits.ndim != 2 or len(targets) != logits.shape[0] or weights.shape != (logits.shape[1],):
        raise ShapeMismatch(
            f"logits {logits.shape}, targets {np.shape(targets)}, weights {weights.shape} disagree"
        )
    valid = _valid_targets(targets, logits.shape[1])
    count = int(valid.sum())
    if count == 0:
        raise EmptyBatch("cross-entropy over an all-ignore batch")
    rows = np.flatnonzero(valid)
    t = np.asarray(targets).astype(np.int64)[rows]
    log_p = log_softmax(logits[rows], axis=1)
    w = weights[t]
    loss = float(np.sum(-w * log_p[np.arange(count), t]) / count)

    grad = np.zeros_like(logits)
    g = np.exp(log_p)
    g[np.arange(count), t] -= 1.0
    grad[rows] = g * (w / count)[:, None]
    return loss, grad


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard extension along a descending error order"""
    gt_sorted = np.asarray(gt_sorted, dtype=np.float64)
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probabilities: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Lovasz-softmax averaged over classes present in the targets

    Returns:
        (loss, gradient w.r.t. probabilities); IGNORE rows get zero gradient

    Raises:
        EmptyBatch: No non-IGNORE element
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or len(targets) != probs.shape[0]:
        raise ShapeMismatch(f"probabilities {probs.shape} vs targets {np.shape(targets)}")
    valid = _valid_targets(targets, probs.shape[1])
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        raise EmptyBatch("Lovasz-softmax over an all-ignore batch")
    t = np.asarray(targets).astype(np.int64)[rows]
    p = probs[rows]

    present = [c for c in range(probs.shape[1]) if np.any(t == c)]
    grad_rows = np.zeros_like(p)
    total = 0.0
    for c in present:
        fg = (t == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        weights = lovasz_grad(fg[order])
        total += float(np.dot(errors[order], weights))
        sign = np.where(fg[order] > 0, -1.0, 1.0)
        grad_rows[order, c] += weights * sign
    scale = 1.0 / len(present)
    grad = np.zeros_like(probs)
    grad[rows] = grad_rows * scale
    return total * scale, grad


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of row softmax"""
    return probs * (grad_probs - np.sum(probs * grad_probs, axis=1, keepdims=True))


def voxel_loss(voxel_logits: np.ndarray, voxel_targets: np.ndarray,
               class_weights: np.ndarray) -> tuple[float, float, np.ndarray]:
    """(cross-entropy, Lovasz, gradient) for (K, H, W, L) logits and flat (V,) targets"""
    k = voxel_logits.shape[0]
    flat = np.asarray(voxel_logits, dtype=np.float64).reshape(k, -1).T
    if flat.shape[0] != len(voxel_targets):
        raise ShapeMismatch(f"{flat.shape[0]} voxels vs {len(voxel_targets)} targets")
    ce, grad_ce = weighted_cross_entropy(flat, voxel_targets, class_weights)
    probs = softmax(flat, axis=1)
    lov, grad_probs = lovasz_softmax(probs, voxel_targets)
    grad = grad_ce + softmax_backward(probs, grad_probs)
    return ce, lov, grad.T.reshape(voxel_logits.shape)


def total_loss(voxel_logits: np.ndarray, voxel_targets: np.ndarray, point_logits: np.ndarray,
               point_targets: np.ndarray, cfg: LossConfig) -> LossResult:
    """
    alpha * L_point + beta * L_voxel with gradients w.r.t. both logit sets

    A term whose targets are all IGNORE contributes 0 and a zero gradient.
    """
    weights = cfg.weights
    if len(weights) != voxel_logits.shape[0]:
        raise ShapeMismatch(f"{len(weights)} class weights for {voxel_logits.shape[0]} classes")

    grad_voxel = np.zeros(voxel_logits.shape, dtype=np.float64)
    ce = lov = 0.0
    if cfg.beta > 0 and has_targets(voxel_targets):
        ce, lov, g = voxel_loss(voxel_logits, voxel_targets, weights)
        grad_voxel = cfg.beta * g
    grad_point = np.zeros(np.shape(point_logits), dtype=np.float64)
    point = 0.0
    if cfg.alpha > 0 and has_targets(point_targets):
        point, g = weighted_cross_entropy(point_logits, point_targets, weights)
        grad_point = cfg.alpha * g

    voxel = ce + lov
    return LossResult(
        total=cfg.alpha * point + cfg.beta * voxel,
        voxel=voxel,
        point=point,
        voxel_ce=ce,
        voxel_lovasz=lov,
        grad_voxel_logits=grad_voxel.astype(voxel_logits.dtype),
        grad_point_logits=grad_point.astype(np.asarray(point_logits).dtype),
    )
