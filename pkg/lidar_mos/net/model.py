"""
MosModel - end-to-end moving object segmentation network

Pipeline for one residual stack:

    per-frame point MLP -> max-pool scatter -> residual grids (G0 - Gi)
    -> concat [G0, R1..Rk] -> stem -> 3 down blocks -> 3 up blocks with skips
    -> DDCM -> 1x1x1 conv (voxel logits)
    DDCM features gathered back to current-frame points + point features
    -> refine head (point logits)

Parameters are created in a fixed order from one seeded generator, so equal
config + seed give bit-identical weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..cylvoxel import (
    CylindricalGridSpec,
    PointVoxelMapping,
    assign_voxels,
    scatter_max_pool_backward,
    scatter_max_pool_with_argmax,
)
from ..errors import OddDimension, ShapeMismatch
from ..kitti_io import MotionLabel
from ..residual import ResidualStack, voxel_residual_features
from .blocks import DDCM, DownBlock, GatherRefine, PointMLP, RefineHead, UpBlock, point_inputs
from .layers import Conv3d, LeakyReLU, assert_finite
from .params import POINT_INPUT_DIM, STAGE_COUNT, Initializer, LayerParams, ModelConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelOutput:
    voxel_logits: np.ndarray  # (num_classes, H, W, L)
    point_logits: np.ndarray  # (N, num_classes) for the current frame
    mapping: PointVoxelMapping  # current frame

    def predicted_motion(self) -> np.ndarray:
        return np.argmax(self.point_logits, axis=1).astype(np.uint8)


class MosModel:
    """Parameters plus blocks for one grid spec and model config"""

    def __init__(self, config: ModelConfig, spec: CylindricalGridSpec):
        factor = 2 ** STAGE_COUNT
        if any(n % factor for n in spec.bins):
            raise OddDimension(f"grid bins {spec.bins} must be divisible by {factor}")
        self.config = config
        self.spec = spec
        self.params = LayerParams()
        init = Initializer(config.seed, config.dtype)
        slope = config.leaky_slope
        p = self.params

        self.point_mlp = PointMLP(p.scope("point_mlp"), POINT_INPUT_DIM, config.mlp_hidden_sizes,
                                  config.point_feature_dim, init, slope)
        self.stem = Conv3d(p.scope("stem"), config.input_channels, config.stem_channels, (3, 3, 3), init)
        self.stem_act = LeakyReLU(slope)
        widths = (config.stem_channels,) + config.stage_channels
        self.down = [DownBlock(p.scope(f"down{i + 1}"), widths[i], widths[i + 1], init, slope)
                     for i in range(STAGE_COUNT)]
        self.up = [UpBlock(p.scope(f"up{i + 1}"), widths[i + 1], widths[i], init, slope)
                   for i in range(STAGE_COUNT)]
        self.ddcm = DDCM(p.scope("ddcm"), config.stem_channels, config.ddcm_kernel, init)
        self.voxel_head = Conv3d(p.scope("voxel_head"), config.stem_channels, config.num_classes,
                                 (1, 1, 1), init)
        self.refine = RefineHead(p.scope("refine"), config.stem_channels, config.point_feature_dim,
                                 config.refine_hidden, config.num_classes, init, slope)
        logger.debug("model built: %d tensors, %d values", len(self.params), self.params.num_values())

    @property
    def dtype(self) -> np.dtype:
        return self.config.np_dtype

    def forward(self, stack: ResidualStack):
        """((voxel_logits, point_logits), cache)"""
        cfg = self.config
        if stack.k != cfg.residual_frames:
            raise ShapeMismatch(f"stack has {stack.k} residual frames, model expects {cfg.residual_frames}")
        frames = stack.frames
        mappings = [assign_voxels(scan, self.spec) for scan in frames]
        rows = [point_inputs(scan.points, m, self.dtype).values for scan, m in zip(frames, mappings)]
        sizes = [len(r) for r in rows]

        feats_all, cache_mlp = self.point_mlp.forward(np.concatenate(rows, axis=0))
        assert_finite(feats_all, "point MLP")
        feats = np.split(feats_all, np.cumsum(sizes)[:-1])

        scatters = [scatter_max_pool_with_argmax(f, m, self.spec) for f, m in zip(feats, mappings)]
        grids = [s.grid for s in scatters]
        residuals = voxel_residual_features(grids[0], grids[1:])
        x = np.concatenate([grids[0].data] + [r.data for r in residuals], axis=0)

        x, cache_stem = self.stem.forward(x)
        x, cache_stem_act = self.stem_act.forward(x)
        skips, cache_down = [], []
        for block in self.down:
            (x, skip), cache = block.forward(x)
            skips.append(skip)
            cache_down.append(cache)
        cache_up = [None] * STAGE_COUNT
        for i in reversed(range(STAGE_COUNT)):
            x, cache_up[i] = self.up[i].forward(x, skips[i])
        context, cache_ddcm = self.ddcm.forward(x)
        voxel_logits, cache_head = self.voxel_head.forward(context)

        refine = GatherRefine(self.refine, mappings[0])
        point_logits, cache_refine = refine.forward(context, feats[0])
        assert_finite(voxel_logits, "voxel head")
        assert_finite(point_logits, "refine head")

        cache = {
            "mappings": mappings, "sizes": sizes, "mlp": cache_mlp,
            "winners": [s.winners for s in scatters],
            "stem": cache_stem, "stem_act": cache_stem_act,
            "down": cache_down, "up": cache_up, "ddcm": cache_ddcm,
            "head": cache_head, "refine": (refine, cache_refine),
        }
        return (voxel_logits, point_logits), cache

    def backward(self, grads: tuple[np.ndarray, np.ndarray], cache) -> tuple[None]:
        """Accumulate parameter gradients for (grad voxel_logits, grad point_logits)"""
        grad_voxel, grad_point = grads
        c = self.config.point_feature_dim
        refine, cache_refine = cache["refine"]

        grad_context, grad_feat0 = refine.backward(grad_point, cache_refine)
        grad_context = grad_context + self.voxel_head.backward(grad_voxel, cache["head"])
        g = self.ddcm.backward(grad_context, cache["ddcm"])
        grad_skips = [None] * STAGE_COUNT
        for i in range(STAGE_COUNT):
            g, grad_skips[i] = self.up[i].backward(g, cache["up"][i])
        for i in reversed(range(STAGE_COUNT)):
            g = self.down[i].backward((g, grad_skips[i]), cache["down"][i])
        g = self.stem.backward(self.stem_act.backward(g, cache["stem_act"]), cache["stem"])

        grad_residuals = [g[c * (i + 1):c * (i + 2)] for i in range(self.config.residual_frames)]
        grad_grids = [g[:c] + sum(grad_residuals, np.zeros_like(g[:c]))]
        grad_grids += [-r for r in grad_residuals]

        grad_feats = [
            scatter_max_pool_backward(gg, winners, n)
            for gg, winners, n in zip(grad_grids, cache["winners"], cache["sizes"])
        ]
        grad_feats[0] = grad_feats[0] + grad_feat0
        self.point_mlp.backward(np.concatenate(grad_feats, axis=0), cache["mlp"])
        return (None,)


def model_forward(stack: ResidualStack, model: MosModel) -> ModelOutput:
    (voxel_logits, point_logits), cache = model.forward(stack)
    return ModelOutput(voxel_logits=voxel_logits, point_logits=point_logits, mapping=cache["mappings"][0])


def predict_motion(stack: ResidualStack, model: MosModel) -> np.ndarray:
    """Per-point Static/Moving labels for the current scan (argmax of point logits)"""
    labels = model_forward(stack, model).predicted_motion()
    return np.where(labels == 1, MotionLabel.MOVING, MotionLabel.STATIC).astype(np.uint8)
