"""
Dense layer kernels

Every layer exposes forward(x) -> (y, cache) and backward(grad_y, cache) ->
grad_x. backward() accumulates parameter gradients into the layer's
Parameters; forward() never mutates layer state, so several threads can run
inference on one frozen model.

Grid tensors are (C, H, W, L). H (radius) and L (height) are zero padded, W
(azimuth) is padded circularly.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import expit

from ..errors import NonFiniteValue, ShapeMismatch
from .params import Initializer, LayerParams


def assert_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteValue(f"non-finite values produced by {where}")
    return x


def _check_grid(x: np.ndarray, channels: int, where: str):
    if x.ndim != 4 or x.shape[0] != channels:
        raise ShapeMismatch(f"{where} expects ({channels}, H, W, L), got {x.shape}")


def pad_cylindrical(x: np.ndarray, pads: tuple[int, int, int]) -> np.ndarray:
    ph, pw, pl = pads
    if pw:
        wrap = np.arange(-pw, x.shape[2] + pw) % x.shape[2]
        x = x[:, :, wrap, :]
    if ph or pl:
        x = np.pad(x, ((0, 0), (ph, ph), (0, 0), (pl, pl)))
    return x


def unpad_cylindrical(grad: np.ndarray, pads: tuple[int, int, int], shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of pad_cylindrical: drop zero pads, fold wrapped columns back"""
    ph, pw, pl = pads
    _, h, w, l = shape
    grad = grad[:, ph:ph + h, :, pl:pl + l]
    if not pw:
        return np.ascontiguousarray(grad)
    out = np.zeros(shape, dtype=grad.dtype)
    for j, src in enumerate(np.arange(-pw, w + pw) % w):
        out[:, :, src, :] += grad[:, :, j, :]
    return out


def nearest_upsample(x: np.ndarray) -> np.ndarray:
    """Repeat every cell into a 2x2x2 block"""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def nearest_upsample_backward(grad: np.ndarray) -> np.ndarray:
    c, h, w, l = grad.shape
    return grad.reshape(c, h // 2, 2, w // 2, 2, l // 2, 2).sum(axis=(2, 4, 6))


class Linear:
    """y = x W^T + b on (N, in) rows"""

    def __init__(self, params: LayerParams, in_dim: int, out_dim: int, init: Initializer):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = params.add("weight", init.uniform((out_dim, in_dim), fan_in=in_dim))
        self.bias = params.add("bias", init.uniform((out_dim,), fan_in=in_dim))

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"linear layer expects (N, {self.in_dim}), got {x.shape}")
        return x @ self.weight.value.T + self.bias.value, x

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        x = cache
        self.weight.grad += grad.T @ x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


class LeakyReLU:
    def __init__(self, slope: float = 0.1):
        self.slope = float(slope)

    def forward(self, x: np.ndarray):
        positive = x > 0
        return np.where(positive, x, self.slope * x), positive

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        return np.where(cache, grad, self.slope * grad)


class ChannelAffine:
    """Per-channel scale and shift (stands in for batch normalization)"""

    def __init__(self, params: LayerParams, channels: int, init: Initializer):
        self.channels = channels
        self.scale = params.add("scale", init.constant((channels,), 1.0))
        self.shift = params.add("shift", init.constant((channels,), 0.0))

    def forward(self, x: np.ndarray):
        _check_grid(x, self.channels, "channel affine")
        return x * self.scale.value[:, None, None, None] + self.shift.value[:, None, None, None], x

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        x = cache
        self.scale.grad += np.sum(grad * x, axis=(1, 2, 3))
        self.shift.grad += grad.sum(axis=(1, 2, 3))
        return grad * self.scale.value[:, None, None, None]


class Conv3d:
    """
    Dense 3-D convolution over (C, H, W, L)

    stride 1 uses "same" padding (kernel // 2 per axis, circular on W);
    stride > 1 uses no padding.
    """

    def __init__(self, params: LayerParams, in_channels: int, out_channels: int,
                 kernel: tuple[int, int, int], init: Initializer, stride: int = 1, bias: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = int(stride)
        self.pads = tuple(k // 2 for k in self.kernel) if self.stride == 1 else (0, 0, 0)
        fan_in = in_channels * math.prod(self.kernel)
        self.weight = params.add("weight", init.uniform((out_channels, in_channels) + self.kernel, fan_in))
        self.bias = params.add("bias", init.uniform((out_channels,), fan_in)) if bias else None

    def _out_shape(self, padded_shape: tuple[int, ...]) -> tuple[int, int, int]:
        s = self.stride
        return tuple((n - k) // s + 1 for n, k in zip(padded_shape[1:], self.kernel))

    def _tap(self, tap: tuple[int, int, int], out_shape) -> tuple[slice, ...]:
        s = self.stride
        return (slice(None),) + tuple(slice(t, t + s * n, s) for t, n in zip(tap, out_shape))

    def forward(self, x: np.ndarray):
        _check_grid(x, self.in_channels, "conv3d")
        xp = pad_cylindrical(x, self.pads)
        out_shape = self._out_shape(xp.shape)
        w = self.weight.value
        out = np.zeros((self.out_channels,) + out_shape, dtype=np.result_type(x, w))
        for tap in itertools.product(*(range(k) for k in self.kernel)):
            patch = xp[self._tap(tap, out_shape)]
            out += np.tensordot(w[(slice(None), slice(None)) + tap], patch, axes=(1, 0))
        if self.bias is not None:
            out += self.bias.value[:, None, None, None]
        return out, (xp, x.shape)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        xp, in_shape = cache
        out_shape = grad.shape[1:]
        w = self.weight.value
        grad_xp = np.zeros_like(xp)
        for tap in itertools.product(*(range(k) for k in self.kernel)):
            index = self._tap(tap, out_shape)
            taps = (slice(None), slice(None)) + tap
            self.weight.grad[taps] += np.tensordot(grad, xp[index], axes=([1, 2, 3], [1, 2, 3]))
            grad_xp[index] += np.tensordot(w[taps], grad, axes=(0, 0))
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=(1, 2, 3))
        return unpad_cylindrical(grad_xp, self.pads, in_shape)


class SigmoidGate:
    """y = sigmoid(x) * x"""

    def forward(self, x: np.ndarray):
        s = expit(x)
        return s * x, (x, s)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        x, s = cache
        return grad * (s + x * s * (1.0 - s))
