import dataclasses
import math
import struct

import numpy as np
import pytest

from lidar_mos.cylvoxel import CylindricalGridSpec, assign_voxels, voxel_majority_labels
from lidar_mos.errors import MalformedFile, NonFiniteGradient, OddDimension, ShapeMismatch
from lidar_mos.kitti_io import MotionLabel, RawScan
from lidar_mos.loss import LossConfig, total_loss
from lidar_mos.net import (
    DDCM,
    POINT_INPUT_DIM,
    AsymBlock,
    ChannelAffine,
    Conv3d,
    DownBlock,
    FunctionOp,
    GatherRefine,
    Initializer,
    LayerParams,
    Linear,
    MosModel,
    PointInputs,
    PointMLP,
    RefineHead,
    UpBlock,
    asym_block_forward,
    ddcm_forward,
    decode_checkpoint,
    downsample_block,
    encode_checkpoint,
    finite_diff_gradcheck,
    load_checkpoint,
    mlp_point_features,
    model_forward,
    point_inputs,
    point_refine_forward,
    predict_motion,
    save_checkpoint,
    upsample_block,
)
from lidar_mos.net.checkpoint import MAGIC
from lidar_mos.net.layers import SigmoidGate, nearest_upsample, nearest_upsample_backward
from lidar_mos.residual import ResidualFrame, ResidualStack

TOL = 1e-5


@pytest.fixture
def init():
    return Initializer(seed=11, dtype="float64")


@pytest.fixture
def params():
    return LayerParams()


def assert_gradcheck(op, params, inputs, tolerance=TOL, max_coords=32):
    report = finite_diff_gradcheck(op, params, inputs, tolerance=tolerance, max_coords=max_coords)
    assert report.passed, f"worst tensor {report.worst()}: {report.per_tensor}"


def naive_conv(x, w, b=None):
    """Same-size 3-D convolution by explicit loops: zero padding on H and L, circular on W"""
    out_ch, _, kh, kw, kl = w.shape
    _, H, W, L = x.shape
    out = np.zeros((out_ch, H, W, L))
    for o, h, wi, l in np.ndindex(*out.shape):
        total = 0.0 if b is None else b[o]
        for c, dh, dw, dl in np.ndindex(*w.shape[1:]):
            hh, ll = h + dh - kh // 2, l + dl - kl // 2
            if 0 <= hh < H and 0 <= ll < L:
                total += w[o, c, dh, dw, dl] * x[c, hh, (wi + dw - kw // 2) % W, ll]
        out[o, h, wi, l] = total
    return out


def naive_asym(x, block):
    """x + A(x) + B(x) from the block's weights through naive_conv"""
    out = x.copy()
    for path in (block.path_a, block.path_b):
        first, second, affine = path.layers
        y = naive_conv(naive_conv(x, first.weight.value), second.weight.value)
        out += y * affine.scale.value[:, None, None, None] + affine.shift.value[:, None, None, None]
    return out


def set_center_taps(conv, value=1.0):
    """Zero a square convolution except the identity map at the kernel center"""
    w = conv.weight.value
    w[...] = 0.0
    kh, kw, kl = w.shape[2:]
    for c in range(w.shape[0]):
        w[c, c, kh // 2, kw // 2, kl // 2] = value


class TestLayerGradients:
    def test_linear(self, params, init, rng):
        assert_gradcheck(Linear(params, 5, 3, init), params, (rng.normal(size=(7, 5)),))

    def test_point_mlp(self, params, init, rng):
        mlp = PointMLP(params, 6, (4, 5), 3, init)
        assert_gradcheck(mlp, params, (rng.normal(size=(9, 6)),))

    def test_channel_affine(self, params, init, rng):
        assert_gradcheck(ChannelAffine(params, 2, init), params, (rng.normal(size=(2, 2, 4, 2)),))

    def test_sigmoid_gate(self, rng):
        assert_gradcheck(SigmoidGate(), None, (rng.normal(size=(2, 3, 3, 2)),))

    @pytest.mark.parametrize("kernel", [(3, 3, 3), (3, 1, 3), (1, 1, 1)])
    def test_conv_same_padding(self, params, init, rng, kernel):
        conv = Conv3d(params, 2, 3, kernel, init)
        assert_gradcheck(conv, params, (rng.normal(size=(2, 4, 4, 2)),))

    def test_conv_stride_two(self, params, init, rng):
        conv = Conv3d(params, 2, 3, (2, 2, 2), init, stride=2)
        out, _ = conv.forward(rng.normal(size=(2, 4, 4, 4)))
        assert out.shape == (3, 2, 2, 2)
        assert_gradcheck(conv, params, (rng.normal(size=(2, 4, 4, 4)),))

    def test_conv_matches_naive_loops(self, params, init, rng):
        conv = Conv3d(params, 2, 3, (3, 3, 3), init)
        x = rng.normal(size=(2, 4, 4, 4))
        out, _ = conv.forward(x)
        np.testing.assert_allclose(out, naive_conv(x, conv.weight.value, conv.bias.value), atol=1e-12)

    def test_averaging_stride_keeps_constant(self, params, init):
        conv = Conv3d(params, 1, 1, (2, 2, 2), init, stride=2)
        conv.weight.value[...] = 1.0 / 8
        conv.bias.value[...] = 0.0
        out, _ = conv.forward(np.full((1, 4, 4, 4), 2.5))
        np.testing.assert_allclose(out, 2.5, atol=1e-12)

    def test_upsample_backward_is_adjoint(self, rng):
        x = rng.normal(size=(2, 2, 3, 2))
        g = rng.normal(size=(2, 4, 6, 4))
        assert np.sum(nearest_upsample(x) * g) == pytest.approx(np.sum(x * nearest_upsample_backward(g)))


class TestBlockGradients:
    def test_asym_block(self, params, init, rng):
        assert_gradcheck(AsymBlock(params, 2, init), params, (rng.normal(size=(2, 4, 4, 4)),))

    def test_down_block(self, params, init, rng):
        block = DownBlock(params, 2, 3, init)
        assert_gradcheck(block, params, (rng.normal(size=(2, 4, 4, 4)),))

    def test_down_block_without_skip_gradient(self, params, init, rng):
        block = DownBlock(params, 2, 3, init)
        (out, skip), cache = block.forward(rng.normal(size=(2, 4, 4, 4)))
        grad = block.backward((np.ones_like(out), None), cache)
        assert grad.shape == (2, 4, 4, 4)

    def test_up_block(self, params, init, rng):
        block = UpBlock(params, 3, 2, init)
        inputs = (rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(2, 4, 4, 4)))
        assert_gradcheck(block, params, inputs)

    def test_up_block_skip_shape(self, params, init, rng):
        block = UpBlock(params, 3, 2, init)
        with pytest.raises(ShapeMismatch):
            block.forward(rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(2, 4, 4, 2)))

    def test_ddcm(self, params, init, rng):
        assert_gradcheck(DDCM(params, 2, 3, init), params, (rng.normal(size=(2, 4, 4, 4)),))

    def test_gather_refine(self, params, init, rng, tiny_spec, make_points):
        mapping = assign_voxels(make_points(25, radius=22.0), tiny_spec)
        op = GatherRefine(RefineHead(params, 2, 3, 4, 2, init), mapping)
        inputs = (rng.normal(size=(2,) + tiny_spec.bins), rng.normal(size=(25, 3)))
        assert_gradcheck(op, params, inputs)

    def test_odd_dimension(self, params, init, rng):
        with pytest.raises(OddDimension):
            DownBlock(params, 2, 3, init).forward(rng.normal(size=(2, 4, 3, 4)))


class TestBlockOperations:
    def test_shared_mlp_keeps_frames_apart(self, params, init, tiny_spec, make_points):
        mlp = PointMLP(params, POINT_INPUT_DIM, (4,), 3, init)
        frames = []
        for n in (5, 7):
            pts = make_points(n)
            frames.append(point_inputs(pts, assign_voxels(pts, tiny_spec)))
        per_frame = mlp_point_features(frames, mlp)
        assert [f.shape for f in per_frame] == [(5, 3), (7, 3)]
        np.testing.assert_allclose(per_frame[1], mlp.forward(frames[1].values)[0])

    def test_mlp_input_width_checked(self, params, init):
        mlp = PointMLP(params, POINT_INPUT_DIM, (4,), 3, init)
        with pytest.raises(ShapeMismatch):
            mlp_point_features([PointInputs(values=np.zeros((2, POINT_INPUT_DIM + 1)))], mlp)

    def test_grid_blocks_shapes(self, params, init, rng):
        x = rng.normal(size=(2, 4, 4, 4))
        assert asym_block_forward(x, AsymBlock(params.scope("asym"), 2, init)).shape == (2, 4, 4, 4)
        down = downsample_block(x, DownBlock(params.scope("down"), 2, 3, init))
        assert down.shape == (3, 2, 2, 2)
        up = upsample_block(down, x, UpBlock(params.scope("up"), 3, 2, init))
        assert up.shape == (2, 4, 4, 4)
        assert ddcm_forward(up, DDCM(params.scope("ddcm"), 2, 3, init)).shape == (2, 4, 4, 4)

    def test_point_refine(self, params, init, rng):
        head = RefineHead(params, 3, 2, 4, 2, init)
        logits = point_refine_forward(rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), head)
        assert logits.shape == (6, 2)
        with pytest.raises(ShapeMismatch):
            point_refine_forward(rng.normal(size=(6, 3)), rng.normal(size=(5, 2)), head)
        with pytest.raises(ShapeMismatch):
            point_refine_forward(rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), head)


class TestBlockExamples:
    def test_asym_zero_kernels_is_identity(self, params, init, rng):
        block = AsymBlock(params, 2, init)
        for path in (block.path_a, block.path_b):
            for conv in path.layers[:2]:
                conv.weight.value[...] = 0.0
        x = rng.normal(size=(2, 4, 4, 4))
        np.testing.assert_array_equal(asym_block_forward(x, block), x)

    def test_asym_center_taps_triple_input(self, params, init):
        block = AsymBlock(params, 2, init)
        for path in (block.path_a, block.path_b):
            for conv in path.layers[:2]:
                set_center_taps(conv)
        x = np.tile([-2.0, -1.0, 1.0, 2.0], 4).reshape(2, 2, 2, 2)
        out = asym_block_forward(x, block)
        np.testing.assert_allclose(out, 3.0 * x, atol=1e-12)
        np.testing.assert_allclose(out, naive_asym(x, block), atol=1e-12)

    def test_asym_matches_naive_oracle(self, params, init, rng):
        block = AsymBlock(params, 2, init)
        for path in (block.path_a, block.path_b):
            affine = path.layers[2]
            affine.scale.value[...] = rng.normal(size=2)
            affine.shift.value[...] = rng.normal(size=2)
        x = rng.normal(size=(2, 4, 4, 4))
        np.testing.assert_allclose(asym_block_forward(x, block), naive_asym(x, block), atol=1e-12)

    @pytest.mark.parametrize("shift", [1, 3])
    def test_asym_rolls_with_azimuth(self, params, init, rng, shift):
        block = AsymBlock(params, 2, init)
        x = rng.normal(size=(2, 4, 6, 4))
        rolled = asym_block_forward(np.roll(x, shift, axis=2), block)
        np.testing.assert_allclose(rolled, np.roll(asym_block_forward(x, block), shift, axis=2), atol=1e-12)

    def test_ddcm_zero_kernels_is_identity(self, params, init, rng):
        block = DDCM(params, 2, 3, init)
        for branch in block.branches:
            branch.weight.value[...] = 0.0
        x = rng.normal(size=(2, 4, 4, 4))
        np.testing.assert_array_equal(ddcm_forward(x, block), x)

    def test_ddcm_scalar_closed_form(self, params, init):
        block = DDCM(params, 1, 1, init)
        kernels = (0.5, -1.2, 2.0)
        for branch, k in zip(block.branches, kernels):
            branch.weight.value[...] = k
        x = 0.7
        expected = x + sum(k * x / (1.0 + math.exp(-k * x)) for k in kernels)
        out = ddcm_forward(np.full((1, 1, 1, 1), x), block)
        assert out.item() == pytest.approx(expected, abs=1e-12)

    def test_mlp_zero_weights_give_zero_features(self, params, init, rng):
        mlp = PointMLP(params, POINT_INPUT_DIM, (4,), 3, init)
        for _, param in params.items():
            param.value[...] = 0.0
        (features,) = mlp_point_features([PointInputs(values=rng.normal(size=(5, POINT_INPUT_DIM)))], mlp)
        np.testing.assert_array_equal(features, np.zeros((5, 3)))

    def test_mlp_identity_layer_passes_inputs(self, params, init, rng):
        mlp = PointMLP(params, POINT_INPUT_DIM, (), POINT_INPUT_DIM, init)
        (layer,) = mlp.layers
        layer.weight.value[...] = np.eye(POINT_INPUT_DIM)
        layer.bias.value[...] = 0.0
        values = rng.normal(size=(5, POINT_INPUT_DIM))
        (features,) = mlp_point_features([PointInputs(values=values)], mlp)
        np.testing.assert_array_equal(features, values)


class TestGradcheckHarness:
    def test_detects_wrong_backward(self, rng):
        op = FunctionOp(lambda x: (x ** 2, x), lambda g, x: g * x)
        report = finite_diff_gradcheck(op, None, (rng.normal(size=(5,)),))
        assert not report.passed

    def test_accepts_correct_backward(self, rng):
        op = FunctionOp(lambda x: (np.sin(x), x), lambda g, x: g * np.cos(x))
        assert finite_diff_gradcheck(op, None, (rng.normal(size=(5,)),)).passed

    def test_non_finite_gradient(self):
        op = FunctionOp(lambda x: (np.sqrt(x), x), lambda g, x: g * 0.5 / np.sqrt(x))
        with pytest.raises(NonFiniteGradient):
            finite_diff_gradcheck(op, None, (np.array([0.0]),))

    def test_rejects_single_precision_params(self, rng):
        params = LayerParams()
        layer = Linear(params, 2, 2, Initializer(0, "float32"))
        with pytest.raises(ValueError):
            finite_diff_gradcheck(layer, params, (rng.normal(size=(3, 2)),))

    @pytest.mark.parametrize("step", [0.0, -1e-6, float("nan")])
    def test_bad_step(self, rng, step):
        op = FunctionOp(lambda x: (x, None), lambda g, c: g)
        with pytest.raises(ValueError):
            finite_diff_gradcheck(op, None, (rng.normal(size=(2,)),), step=step)


def make_stack(make_points, k: int, n: int = 30) -> ResidualStack:
    frames = [RawScan(make_points(n, radius=18.0), frame_index=i) for i in range(k + 1)]
    previous = tuple(ResidualFrame(offset=i, scan=frames[i]) for i in range(1, k + 1))
    return ResidualStack(current=frames[0], previous=previous)


class TestMosModel:
    def test_output_shapes(self, tiny_model_config, tiny_spec, make_points):
        model = MosModel(tiny_model_config, tiny_spec)
        out = model_forward(make_stack(make_points, 1), model)
        assert out.voxel_logits.shape == (2,) + tiny_spec.bins
        assert out.point_logits.shape == (30, 2)

    def test_end_to_end_gradients(self, tiny_model_config, tiny_spec, make_points):
        model = MosModel(tiny_model_config, tiny_spec)
        report = finite_diff_gradcheck(model, model.params, (make_stack(make_points, 1),),
                                       tolerance=1e-4, max_coords=3)
        assert report.passed, f"worst tensor {report.worst()}: {report.max_rel_error:.2e}"
        assert report.checked > 0

    def test_same_seed_same_weights(self, tiny_model_config, tiny_spec):
        a = MosModel(tiny_model_config, tiny_spec).params.state()
        b = MosModel(tiny_model_config, tiny_spec).params.state()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seed_differs(self, tiny_model_config, tiny_spec):
        other = dataclasses.replace(tiny_model_config, seed=8)
        a = MosModel(tiny_model_config, tiny_spec).params.state()
        b = MosModel(other, tiny_spec).params.state()
        assert any(not np.array_equal(a[n], b[n]) for n in a)

    def test_grid_must_halve_three_times(self, tiny_model_config):
        spec = CylindricalGridSpec(bins=(8, 8, 4))
        with pytest.raises(OddDimension):
            MosModel(tiny_model_config, spec)

    def test_stack_depth_must_match(self, tiny_model_config, tiny_spec, make_points):
        model = MosModel(tiny_model_config, tiny_spec)
        with pytest.raises(ShapeMismatch):
            model.forward(make_stack(make_points, 2))

    def test_prediction_codes(self, tiny_model_config, tiny_spec, make_points):
        model = MosModel(tiny_model_config, tiny_spec)
        labels = predict_motion(make_stack(make_points, 1), model)
        assert set(np.unique(labels)) <= {MotionLabel.STATIC, MotionLabel.MOVING}

    def test_single_precision_forward(self, tiny_model_config, tiny_spec, make_points):
        model = MosModel(dataclasses.replace(tiny_model_config, dtype="float32"), tiny_spec)
        out = model_forward(make_stack(make_points, 1), model)
        assert out.point_logits.dtype == np.float32

    def test_out_of_range_points_still_get_logits(self, tiny_model_config, tiny_spec):
        far = RawScan(np.array([[100.0, 0.0, 0.0, 0.1], [1.0, 1.0, 0.0, 0.2]]))
        stack = ResidualStack(current=far, previous=(ResidualFrame(1, far),))
        out = model_forward(stack, MosModel(tiny_model_config, tiny_spec))
        assert np.all(np.isfinite(out.point_logits))

    def test_without_residual_frames(self, tiny_model_config, tiny_spec, make_points):
        config = dataclasses.replace(tiny_model_config, residual_frames=0)
        model = MosModel(config, tiny_spec)
        assert model.stem.weight.shape[1] == config.point_feature_dim
        out = model_forward(make_stack(make_points, 0), model)
        assert out.voxel_logits.shape == (2,) + tiny_spec.bins
        assert out.point_logits.shape == (30, 2)
        assert np.all(np.isfinite(out.point_logits))

    def test_forward_is_bit_identical(self, tiny_model_config, tiny_spec, make_points):
        stack = make_stack(make_points, 1)
        first = model_forward(stack, MosModel(tiny_model_config, tiny_spec))
        second = model_forward(stack, MosModel(tiny_model_config, tiny_spec))
        np.testing.assert_array_equal(first.voxel_logits, second.voxel_logits)
        np.testing.assert_array_equal(first.point_logits, second.point_logits)

    def test_loss_gradients_end_to_end(self, tiny_model_config, tiny_spec, make_points, rng):
        model = MosModel(tiny_model_config, tiny_spec)
        stack = make_stack(make_points, 1)
        point_targets = rng.integers(0, 2, size=len(stack.current)).astype(np.uint8)
        voxel_targets = voxel_majority_labels(point_targets, assign_voxels(stack.current, tiny_spec))
        loss_cfg = LossConfig(alpha=1.0, beta=0.5, class_weights=(1.0, 3.0))

        def forward(s):
            (voxel_logits, point_logits), cache = model.forward(s)
            result = total_loss(voxel_logits, voxel_targets, point_logits, point_targets, loss_cfg)
            return np.array(result.total), (result, cache)

        def backward(grad, state):
            result, cache = state
            scale = float(grad)
            return model.backward((scale * result.grad_voxel_logits, scale * result.grad_point_logits), cache)

        report = finite_diff_gradcheck(FunctionOp(forward, backward), model.params, (stack,),
                                       tolerance=1e-4, max_coords=12)
        assert report.passed, f"worst tensor {report.worst()}: {report.max_rel_error:.2e}"
        assert report.checked > 0


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tmp_path, tiny_model_config, tiny_spec, make_points):
        model = MosModel(dataclasses.replace(tiny_model_config, seed=3), tiny_spec)
        save_checkpoint(tmp_path / "model.ckpt", model)
        loaded = load_checkpoint(tmp_path / "model.ckpt")
        assert loaded.config == model.config
        assert loaded.spec == model.spec
        stack = make_stack(make_points, 1)
        np.testing.assert_array_equal(model_forward(stack, model).point_logits,
                                      model_forward(stack, loaded).point_logits)

    def test_single_precision_round_trip_is_exact(self, tiny_model_config, tiny_spec):
        model = MosModel(dataclasses.replace(tiny_model_config, dtype="float32"), tiny_spec)
        loaded = decode_checkpoint(encode_checkpoint(model))
        for name, value in model.params.state().items():
            np.testing.assert_array_equal(loaded.params.state()[name], value)

    def test_bad_magic(self, tiny_model_config, tiny_spec):
        data = encode_checkpoint(MosModel(tiny_model_config, tiny_spec))
        with pytest.raises(MalformedFile):
            decode_checkpoint(b"NOTACKPT" + data[len(MAGIC):])

    def test_unknown_version(self, tiny_model_config, tiny_spec):
        data = encode_checkpoint(MosModel(tiny_model_config, tiny_spec))
        patched = MAGIC + struct.pack("<I", 99) + data[len(MAGIC) + 4:]
        with pytest.raises(MalformedFile):
            decode_checkpoint(patched)

    def test_truncated(self, tiny_model_config, tiny_spec):
        data = encode_checkpoint(MosModel(tiny_model_config, tiny_spec))
        with pytest.raises(MalformedFile):
            decode_checkpoint(data[:-5])

    def test_trailing_bytes(self, tiny_model_config, tiny_spec):
        data = encode_checkpoint(MosModel(tiny_model_config, tiny_spec))
        with pytest.raises(MalformedFile):
            decode_checkpoint(data + b"\x00")
