"""
Network blocks

Composite blocks built from the layer kernels, each with the same
forward -> (y, cache) / backward(grad, cache) contract:

- PointMLP: per-point feature extractor
- AsymBlock: two crisscross convolution paths plus identity skip
- DownBlock / UpBlock: encoder and decoder stages
- DDCM: dimension-decomposition context module
- RefineHead: point-wise refinement over gathered voxel features
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cylvoxel import (
    PointVoxelMapping,
    VoxelFeatureGrid,
    gather_point_features,
    gather_point_features_backward,
)
from ..errors import OddDimension, ShapeMismatch
from .layers import (
    ChannelAffine,
    Conv3d,
    LeakyReLU,
    Linear,
    SigmoidGate,
    _check_grid,
    assert_finite,
    nearest_upsample,
    nearest_upsample_backward,
)
from .params import POINT_INPUT_DIM, Initializer, LayerParams

ASYM_KERNELS = ((3, 1, 3), (1, 3, 3))


class _Sequential:
    """Chain of layers sharing the forward/backward contract"""

    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, grad, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache)
        return grad


class PointMLP(_Sequential):
    """Linear layers with leaky activations between them; the last layer is linear"""

    def __init__(self, params: LayerParams, in_dim: int, hidden: tuple[int, ...], out_dim: int,
                 init: Initializer, slope: float = 0.1):
        sizes = (in_dim,) + tuple(hidden) + (out_dim,)
        layers: list = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i:
                layers.append(LeakyReLU(slope))
            layers.append(Linear(params.scope(f"fc{i}"), a, b, init))
        super().__init__(layers)
        self.in_dim = in_dim
        self.out_dim = out_dim


class AsymBlock:
    """
    out = x + A(x) + B(x)

    A: conv(3,1,3) -> conv(1,3,3) -> channel affine
    B: conv(1,3,3) -> conv(3,1,3) -> channel affine
    Both paths are linear; the enclosing down and up blocks apply the
    activation. Convolutions inside the paths carry no bias; the affine shift
    plays that role.
    """

    def __init__(self, params: LayerParams, channels: int, init: Initializer):
        self.channels = channels
        first, second = ASYM_KERNELS
        self.path_a = _Sequential([
            Conv3d(params.scope("a1"), channels, channels, first, init, bias=False),
            Conv3d(params.scope("a2"), channels, channels, second, init, bias=False),
            ChannelAffine(params.scope("a_norm"), channels, init),
        ])
        self.path_b = _Sequential([
            Conv3d(params.scope("b1"), channels, channels, second, init, bias=False),
            Conv3d(params.scope("b2"), channels, channels, first, init, bias=False),
            ChannelAffine(params.scope("b_norm"), channels, init),
        ])

    def forward(self, x: np.ndarray):
        _check_grid(x, self.channels, "asymmetric block")
        a, cache_a = self.path_a.forward(x)
        b, cache_b = self.path_b.forward(x)
        return x + a + b, (cache_a, cache_b)

    def backward(self, grad: np.ndarray, cache) -> np.ndarray:
        cache_a, cache_b = cache
        return grad + self.path_a.backward(grad, cache_a) + self.path_b.backward(grad, cache_b)


class DownBlock:
    """asym block, then a stride-2 kernel-2 convolution and leaky activation

    forward returns (downsampled, skip) where skip is the asym output at the
    input resolution.
    """

    def __init__(self, params: LayerParams, in_channels: int, out_channels: int,
                 init: Initializer, slope: float = 0.1):
        self.asym = AsymBlock(params.scope("asym"), in_channels, init)
        self.pool = Conv3d(params.scope("pool"), in_channels, out_channels, (2, 2, 2), init, stride=2)
        self.act = LeakyReLU(slope)

    def forward(self, x: np.ndarray):
        if x.ndim == 4 and any(n % 2 for n in x.shape[1:]):
            raise OddDimension(f"cannot halve spatial dims {x.shape[1:]}")
        skip, cache_asym = self.asym.forward(x)
        pooled, cache_pool = self.pool.forward(skip)
        out, cache_act = self.act.forward(pooled)
        return (out, skip), (cache_asym, cache_pool, cache_act)

    def backward(self, grads: tuple[np.ndarray, np.ndarray | None], cache) -> np.ndarray:
        """grads = (grad wrt downsampled output, grad wrt skip or None)"""
        grad_out, grad_skip = grads
        cache_asym, cache_pool, cache_act = cache
        grad = self.pool.backward(self.act.backward(grad_out, cache_act), cache_pool)
        if grad_skip is not None:
            grad = grad + grad_skip
        return self.asym.backward(grad, cache_asym)


class UpBlock:
    """nearest x2 repeat -> conv k3 -> leaky -> + encoder skip -> asym block"""

    def __init__(self, params: LayerParams, in_channels: int, out_channels: int,
                 init: Initializer, slope: float = 0.1):
        self.out_channels = out_channels
        self.conv = Conv3d(params.scope("conv"), in_channels, out_channels, (3, 3, 3), init)
        self.act = LeakyReLU(slope)
        self.asym = AsymBlock(params.scope("asym"), out_channels, init)

    def forward(self, x: np.ndarray, skip: np.ndarray):
        up = nearest_upsample(x)
        expected = (self.out_channels,) + up.shape[1:]
        if skip.shape != expected:
            raise ShapeMismatch(f"skip has shape {skip.shape}, expected {expected}")
        conv, cache_conv = self.conv.forward(up)
        act, cache_act = self.act.forward(conv)
        out, cache_asym = self.asym.forward(act + skip)
        return out, (cache_conv, cache_act, cache_asym)

    def backward(self, grad: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        """Returns (grad wrt x, grad wrt skip)"""
        cache_conv, cache_act, cache_asym = cache
        grad_sum = self.asym.backward(grad, cache_asym)
        grad_up = self.conv.backward(self.act.backward(grad_sum, cache_act), cache_conv)
        return nearest_upsample_backward(grad_up), grad_sum


class DDCM:
    """
    Dimension-decomposition context module

    Three rank-1 branches with kernels (k,1,1), (1,k,1), (1,1,k); each branch
    output b is gated as sigmoid(b) * b and the gated branches are added to x.
    """

    def __init__(self, params: LayerParams, channels: int, kernel: int, init: Initializer):
        self.channels = channels
        shapes = ((kernel, 1, 1), (1, kernel, 1), (1, 1, kernel))
        self.branches = [
            Conv3d(params.scope(f"branch{axis}"), channels, channels, shape, init, bias=False)
            for axis, shape in zip("hwl", shapes)
        ]
        self.gate = SigmoidGate()

    def forward(self, x: np.ndarray):
        _check_grid(x, self.channels, "DDCM")
        out = x.copy()
        caches = []
        for branch in self.branches:
            b, cache_b = branch.forward(x)
            g, cache_g = self.gate.forward(b)
            out += g
            caches.append((cache_b, cache_g))
        return out, caches

    def backward(self, grad: np.ndarray, caches) -> np.ndarray:
        grad_x = grad.copy()
        for branch, (cache_b, cache_g) in zip(self.branches, caches):
            grad_x += branch.backward(self.gate.backward(grad, cache_g), cache_b)
        return grad_x


class RefineHead(_Sequential):
    """Two-layer MLP over [gathered voxel features, point features] -> class logits"""

    def __init__(self, params: LayerParams, voxel_dim: int, point_dim: int, hidden: int,
                 num_classes: int, init: Initializer, slope: float = 0.1):
        super().__init__([
            Linear(params.scope("fc0"), voxel_dim + point_dim, hidden, init),
            LeakyReLU(slope),
            Linear(params.scope("fc1"), hidden, num_classes, init),
        ])
        self.voxel_dim = voxel_dim
        self.point_dim = point_dim


class GatherRefine:
    """gather voxel features onto points, then RefineHead; differentiable in both inputs"""

    def __init__(self, head: RefineHead, mapping: PointVoxelMapping):
        self.head = head
        self.mapping = mapping

    def forward(self, grid: np.ndarray, point_features: np.ndarray):
        gathered = gather_point_features(VoxelFeatureGrid(data=grid, spec=self.mapping.spec), self.mapping)
        if gathered.shape[0] != point_features.shape[0]:
            raise ShapeMismatch(f"{gathered.shape[0]} gathered rows vs {point_features.shape[0]} point rows")
        logits, cache = self.head.forward(np.concatenate([gathered, point_features], axis=1))
        return logits, cache

    def backward(self, grad: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
        grad_in = self.head.backward(grad, cache)
        grad_gathered = grad_in[:, :self.head.voxel_dim]
        grad_points = grad_in[:, self.head.voxel_dim:]
        return gather_point_features_backward(grad_gathered, self.mapping), grad_points


@dataclass(frozen=True)
class PointInputs:
    """Raw per-point MLP input rows for one frame"""
    values: np.ndarray  # (N, POINT_INPUT_DIM)


def point_inputs(points: np.ndarray, mapping: PointVoxelMapping, dtype=np.float64) -> PointInputs:
    """(drho, dtheta * rho_center, dz, rho, z, intensity) per point"""
    points = np.asarray(points)
    if points.shape[0] != len(mapping):
        raise ShapeMismatch(f"{points.shape[0]} points but mapping covers {len(mapping)}")
    values = np.concatenate([
        mapping.within_voxel_offset,
        mapping.cylindrical[:, [0, 2]],
        points[:, 3:4],
    ], axis=1).astype(dtype)
    return PointInputs(values=values.reshape(-1, POINT_INPUT_DIM))


def mlp_point_features(frames: list[PointInputs], mlp: PointMLP) -> list[np.ndarray]:
    """Shared MLP over every frame's points; returns one (N_i, C) array per frame"""
    for inputs in frames:
        if inputs.values.shape[1] != mlp.in_dim:
            raise ShapeMismatch(f"MLP expects {mlp.in_dim} inputs, got {inputs.values.shape[1]}")
    sizes = [len(inputs.values) for inputs in frames]
    stacked = np.concatenate([inputs.values for inputs in frames], axis=0)
    out, _ = mlp.forward(stacked)
    assert_finite(out, "point MLP")
    return np.split(out, np.cumsum(sizes)[:-1])


def asym_block_forward(x: np.ndarray, block: AsymBlock) -> np.ndarray:
    return assert_finite(block.forward(x)[0], "asymmetric block")


def downsample_block(x: np.ndarray, block: DownBlock) -> np.ndarray:
    (out, _), _ = block.forward(x)
    return assert_finite(out, "down block")


def upsample_block(x: np.ndarray, skip: np.ndarray, block: UpBlock) -> np.ndarray:
    return assert_finite(block.forward(x, skip)[0], "up block")


def ddcm_forward(x: np.ndarray, block: DDCM) -> np.ndarray:
    return assert_finite(block.forward(x)[0], "DDCM")


def point_refine_forward(gathered: np.ndarray, point_features: np.ndarray, head: RefineHead) -> np.ndarray:
    """Concatenate gathered voxel vectors with point features and map to per-point logits"""
    if gathered.shape[0] != point_features.shape[0]:
        raise ShapeMismatch(f"{gathered.shape[0]} gathered rows vs {point_features.shape[0]} point rows")
    if gathered.shape[1] != head.voxel_dim or point_features.shape[1] != head.point_dim:
        raise ShapeMismatch(
            f"refine head expects {head.voxel_dim}+{head.point_dim} features, "
            f"got {gathered.shape[1]}+{point_features.shape[1]}"
        )
    logits, _ = head.forward(np.concatenate([gathered, point_features], axis=1))
    return assert_finite(logits, "refine head")
