"""
Parameters and model configuration

LayerParams is a flat, ordered registry of named Parameters. Blocks receive a
scoped view ("down1.asym.a1.weight") and keep direct references to the
Parameter objects they create, so gradients accumulate in one place.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from ..errors import ConfigError, ShapeMismatch

# (drho, dtheta * rho_center, dz, rho, z, intensity)
POINT_INPUT_DIM = 6
STAGE_COUNT = 3


@dataclass(frozen=True)
class ModelConfig:
    point_feature_dim: int = 8
    mlp_hidden_sizes: tuple[int, ...] = (16,)
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (8, 12, 16)
    ddcm_kernel: int = 3
    refine_hidden: int = 16
    residual_frames: int = 3
    num_classes: int = 2
    leaky_slope: float = 0.1
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden_sizes", tuple(int(s) for s in self.mlp_hidden_sizes))
        object.__setattr__(self, "stage_channels", tuple(int(s) for s in self.stage_channels))
        for name in ("point_feature_dim", "stem_channels", "ddcm_kernel", "refine_hidden", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if len(self.stage_channels) != STAGE_COUNT:
            raise ConfigError(f"model.stage_channels needs {STAGE_COUNT} entries, got {self.stage_channels}")
        if min(self.stage_channels) < 1 or (self.mlp_hidden_sizes and min(self.mlp_hidden_sizes) < 1):
            raise ConfigError("channel widths must be positive")
        if self.residual_frames < 0:
            raise ConfigError(f"model.residual_frames must be >= 0, got {self.residual_frames}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def input_channels(self) -> int:
        """Channels of the stacked grid: current grid plus k residual grids"""
        return self.point_feature_dim * (self.residual_frames + 1)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mlp_hidden_sizes"] = list(self.mlp_hidden_sizes)
        data["stage_channels"] = list(self.stage_channels)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class Parameter:
    """A parameter tensor and its gradient buffer of identical shape"""
    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


class Initializer:
    """Seeded uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) draws in creation order"""

    def __init__(self, seed: int, dtype: np.dtype | str = "float64"):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def uniform(self, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = math.sqrt(1.0 / max(fan_in, 1))
        return self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)

    def constant(self, shape: tuple[int, ...], value: float) -> np.ndarray:
        return np.full(shape, value, dtype=self.dtype)


class LayerParams:
    """
    Ordered name -> Parameter registry with prefix scoping

    Scoped views share the root store; iteration on a view yields only the
    names under its prefix, with the prefix stripped.
    """

    def __init__(self, store: dict[str, Parameter] | None = None, prefix: str = ""):
        self._store: dict[str, Parameter] = {} if store is None else store
        self._prefix = prefix

    def scope(self, name: str) -> "LayerParams":
        return LayerParams(self._store, f"{self._prefix}{name}.")

    def add(self, name: str, value: np.ndarray) -> Parameter:
        full = self._prefix + name
        if full in self._store:
            raise KeyError(f"parameter {full!r} already registered")
        param = Parameter(np.ascontiguousarray(value))
        self._store[full] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._store[self._prefix + name]

    def __contains__(self, name: str) -> bool:
        return self._prefix + name in self._store

    def items(self) -> Iterator[tuple[str, Parameter]]:
        n = len(self._prefix)
        for key, param in self._store.items():
            if key.startswith(self._prefix):
                yield key[n:], param

    def names(self) -> list[str]:
        return [name for name, _ in self.items()]

    def __len__(self) -> int:
        return sum(1 for _ in self.items())

    def num_values(self) -> int:
        return sum(p.value.size for _, p in self.items())

    def zero_grad(self):
        for _, param in self.items():
            param.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: param.value.copy() for name, param in self.items()}

    def load_state(self, values: dict[str, np.ndarray]):
        """Overwrite values in place; names and shapes must match exactly"""
        expected = set(self.names())
        if set(values) != expected:
            missing = sorted(expected - set(values))
            extra = sorted(set(values) - expected)
            raise ShapeMismatch(f"parameter names differ (missing={missing}, unexpected={extra})")
        for name, param in self.items():
            value = np.asarray(values[name])
            if value.shape != param.shape:
                raise ShapeMismatch(f"{name}: shape {value.shape} != {param.shape}")
            param.value[...] = value
