"""
Net submodule - dense MOS network with hand-written backward passes

Provides:
- ModelConfig, LayerParams, Parameter: configuration and parameter registry
- Layers: Linear, Conv3d, ChannelAffine, LeakyReLU
- Blocks: PointMLP, AsymBlock, DownBlock, UpBlock, DDCM, RefineHead
- MosModel: full network, model_forward / predict_motion
- finite_diff_gradcheck: gradient verification
- save_checkpoint / load_checkpoint: binary parameter files
"""

from .params import ModelConfig, LayerParams, Parameter, Initializer, POINT_INPUT_DIM
from .layers import Linear, Conv3d, ChannelAffine, LeakyReLU, nearest_upsample
from .blocks import (
    PointMLP,
    AsymBlock,
    DownBlock,
    UpBlock,
    DDCM,
    RefineHead,
    GatherRefine,
    PointInputs,
    point_inputs,
    mlp_point_features,
    asym_block_forward,
    downsample_block,
    upsample_block,
    ddcm_forward,
    point_refine_forward,
)
from .model import MosModel, ModelOutput, model_forward, predict_motion
from .gradcheck import GradcheckReport, FunctionOp, finite_diff_gradcheck
from .checkpoint import save_checkpoint, load_checkpoint, encode_checkpoint, decode_checkpoint

__all__ = [
    # Params
    "ModelConfig",
    "LayerParams",
    "Parameter",
    "Initializer",
    "POINT_INPUT_DIM",
    # Layers
    "Linear",
    "Conv3d",
    "ChannelAffine",
    "LeakyReLU",
    "nearest_upsample",
    # Blocks
    "PointMLP",
    "AsymBlock",
    "DownBlock",
    "UpBlock",
    "DDCM",
    "RefineHead",
    "GatherRefine",
    "PointInputs",
    "point_inputs",
    "mlp_point_features",
    "asym_block_forward",
    "downsample_block",
    "upsample_block",
    "ddcm_forward",
    "point_refine_forward",
    # Model
    "MosModel",
    "ModelOutput",
    "model_forward",
    "predict_motion",
    # Verification
    "GradcheckReport",
    "FunctionOp",
    "finite_diff_gradcheck",
    # Checkpoints
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
]
