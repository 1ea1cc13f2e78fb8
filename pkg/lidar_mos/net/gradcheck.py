"""
Finite-difference gradient checking

The op under test is any object with forward(*inputs) -> (out, cache) and
backward(grad_out, cache) -> input gradients. The scalar checked is
sum(out * r) for a seeded Gaussian projection r, so every output element
contributes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..errors import NonFiniteGradient
from .params import LayerParams

DEFAULT_STEP = 1e-6
DEFAULT_TOLERANCE = 1e-5
MAX_COORDS_PER_TENSOR = 64
# Denominator floor for relative error so near-zero gradients compare absolutely
ABS_FLOOR = 1e-3


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel_error: float = 0.0
    per_tensor: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> str | None:
        if not self.per_tensor:
            return None
        return max(self.per_tensor, key=self.per_tensor.get)


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _as_tuple(value) -> tuple:
    return value if isinstance(value, tuple) else (value,)


def finite_diff_gradcheck(op: Any, params: LayerParams | None, inputs: tuple,
                          step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE,
                          max_coords: int = MAX_COORDS_PER_TENSOR, seed: int = 0) -> GradcheckReport:
    """
    Compare analytic gradients with central differences

    Args:
        op: Object exposing forward/backward
        params: Parameters used by op (None to check inputs only)
        inputs: Positional inputs for op.forward; float64 arrays are checked too
        step: Central-difference step
        tolerance: Pass threshold on max relative error
        max_coords: Coordinates sampled per tensor (all when the tensor is smaller)
        seed: Seed for the projection and the coordinate sample

    Raises:
        ValueError: Non-positive step or non-double tensors
        NonFiniteGradient: An analytic or numeric gradient is not finite
    """
    if not (step > 0 and math.isfinite(step)):
        raise ValueError(f"step must be positive and finite, got {step}")
    params = params if params is not None else LayerParams()
    inputs = tuple(np.array(x, dtype=np.float64) if isinstance(x, np.ndarray) else x for x in inputs)
    for name, param in params.items():
        if param.value.dtype != np.float64:
            raise ValueError(f"gradcheck needs float64 parameters, {name} is {param.value.dtype}")

    rng = np.random.default_rng(seed)
    out, cache = op.forward(*inputs)
    projections = tuple(rng.standard_normal(np.shape(o)) for o in _as_tuple(out))

    def objective() -> float:
        result, _ = op.forward(*inputs)
        return float(sum(np.sum(o * p) for o, p in zip(_as_tuple(result), projections)))

    params.zero_grad()
    grad_out = projections if isinstance(out, tuple) else projections[0]
    input_grads = _as_tuple(op.backward(grad_out, cache))

    targets: list[tuple[str, np.ndarray, np.ndarray]] = [
        (name, param.value, param.grad.copy()) for name, param in params.items()
    ]
    for i, (x, g) in enumerate(zip(inputs, input_grads)):
        if isinstance(x, np.ndarray) and g is not None:
            targets.append((f"input{i}", x, np.asarray(g, dtype=np.float64)))

    report = GradcheckReport(tolerance=tolerance)
    for name, tensor, analytic in targets:
        flat = tensor.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for idx in coords:
            saved = flat[idx]
            flat[idx] = saved + step
            plus = objective()
            flat[idx] = saved - step
            minus = objective()
            flat[idx] = saved
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[idx])
            if not (math.isfinite(numeric) and math.isfinite(a)):
                raise NonFiniteGradient(f"{name}[{idx}]: analytic={a} numeric={numeric}")
            worst = max(worst, relative_error(a, numeric))
        report.per_tensor[name] = worst
        report.checked += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


class FunctionOp:
    """Adapter turning a (forward, backward) pair of callables into a gradcheck op"""

    def __init__(self, forward: Callable, backward: Callable):
        self._forward = forward
        self._backward = backward

    def forward(self, *inputs):
        return self._forward(*inputs)

    def backward(self, grad, cache):
        return self._backward(grad, cache)
