import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meafdet.fusion import (
    FusionParams,
    apply_attention,
    channel_excitation_fuse,
    excitation_vector,
    generate_mask,
    meaf_forward,
    refine_features,
    scale_modalities,
    spatial_attention,
)
from meafdet.tensor import ComputeTape, backward, conv2d, relu, tensor


def _inputs(rng, n=1, h=32, w=32):
    return tensor(rng.random((n, 3, h, w))), tensor(rng.random((n, 1, h, w)))


@pytest.fixture
def params():
    return FusionParams.init(np.random.default_rng(7))


def test_output_shape_and_width(params, rng):
    rgb, ir = _inputs(rng, 2, 32, 64)
    fused, trace = meaf_forward(rgb, ir, params, record_trace=True)
    assert fused.shape == (2, 32, 32, 64)
    assert trace.refined["rgb"].shape == (2, 16, 32, 64)
    assert trace.attention["ir"].shape == (2, 1, 32, 64)
    assert trace.excitation.shape == (2, 32)
    assert trace.fused is fused


def test_trace_off_by_default(params, rng):
    rgb, ir = _inputs(rng)
    assert meaf_forward(rgb, ir, params)[1] is None


def test_stagewise_recomposition_is_exact(params, rng):
    rgb, ir = _inputs(rng)
    fused, _ = meaf_forward(rgb, ir, params)
    rgb1, ir1 = scale_modalities(rgb, ir, params.modal)
    outs = []
    for raw, scaled, b in ((rgb, rgb1, params.rgb), (ir, ir1, params.ir)):
        m = generate_mask(scaled, b.mask)
        x2 = refine_features(m, raw, b.refine_weight, b.refine_bias)
        outs.append(apply_attention(x2, spatial_attention(x2, b.sa_weight, b.sa_bias)))
    again, gate = channel_excitation_fuse(*outs, params.fc1_weight, params.fc1_bias, params.fc2_weight, params.fc2_bias)
    assert np.array_equal(again.data, fused.data)
    assert gate.shape == (1, 32)


def test_mask_formula(params, rng):
    x = tensor(rng.random((1, 3, 8, 8)))
    c = params.rgb.mask
    hidden = relu(conv2d(x, c.conv3_weight, c.conv3_bias, padding=1))
    expect = x.data * conv2d(hidden, c.conv1_weight, c.conv1_bias).data
    np.testing.assert_allclose(generate_mask(x, c).data, expect, rtol=1e-6)


def test_refinement_uses_raw_input(params, rng):
    rgb, ir = _inputs(rng, 1, 8, 8)
    _, tr = meaf_forward(rgb, ir, params, record_trace=True)
    b = params.rgb
    expect = conv2d(tensor(tr.mask["rgb"].data + rgb.data), b.refine_weight, b.refine_bias, padding=1)
    np.testing.assert_allclose(tr.refined["rgb"].data, expect.data, rtol=1e-6)


def test_modal_scalars_scale_inputs(params, rng):
    rgb, ir = _inputs(rng, 1, 4, 4)
    params.modal.p_rgb.data[...] = 0.25
    a, b = scale_modalities(rgb, ir, params.modal)
    np.testing.assert_allclose(a.data, rgb.data * 0.25)
    np.testing.assert_allclose(b.data, ir.data * 0.5)


def test_spatial_attention_oracle(rng):
    x = tensor(rng.normal(size=(1, 5, 6, 6)))
    w = tensor(np.array([0.7, -1.3]).reshape(1, 2, 1, 1))
    b = tensor(np.array([0.1]))
    z = 0.7 * x.data.mean(axis=1) - 1.3 * x.data.max(axis=1) + 0.1
    np.testing.assert_allclose(spatial_attention(x, w, b).data[:, 0], 1 / (1 + np.exp(-z)), rtol=1e-5)


def test_excitation_oracle(params, rng):
    x = rng.normal(size=(2, 32, 4, 4)).astype(np.float32)
    g = x.mean(axis=(2, 3))
    h = np.maximum(g @ params.fc1_weight.data.T + params.fc1_bias.data, 0)
    z = h @ params.fc2_weight.data.T + params.fc2_bias.data
    got = excitation_vector(tensor(x), params.fc1_weight, params.fc1_bias, params.fc2_weight, params.fc2_bias)
    np.testing.assert_allclose(got.data, 1 / (1 + np.exp(-z)), rtol=1e-5)


def test_misaligned_modalities_rejected(params, rng):
    with pytest.raises(ValueError):
        meaf_forward(tensor(rng.random((1, 3, 32, 32))), tensor(rng.random((1, 1, 16, 32))), params)


def test_attention_shape_checked(rng):
    with pytest.raises(ValueError):
        apply_attention(tensor(rng.random((1, 4, 4, 4))), tensor(rng.random((1, 2, 4, 4))))


def test_reduction_must_divide_width():
    with pytest.raises(ValueError):
        FusionParams.init(np.random.default_rng(0), mid_channels=3, reduction=4)


def test_gradients_reach_every_fusion_parameter(params, rng):
    rgb, ir = _inputs(rng, 1, 16, 16)
    with ComputeTape() as tape:
        fused, _ = meaf_forward(rgb, ir, params)
        loss = (fused * fused).mean()
    backward(tape, loss)
    for name, p in params.named_parameters().items():
        assert p.grad is not None and p.grad.shape == p.shape, name
    assert abs(float(params.modal.p_ir.grad)) > 0


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**16),
    h=st.sampled_from([4, 8, 12]),
    w=st.sampled_from([4, 8, 16]),
    scale=st.floats(0.1, 2.0),
)
def test_gates_strictly_inside_unit_interval(seed, h, w, scale):
    rng = np.random.default_rng(seed)
    params = FusionParams.init(rng)
    rgb = tensor(rng.random((1, 3, h, w)) * scale)
    ir = tensor(rng.random((1, 1, h, w)) * scale)
    fused, tr = meaf_forward(rgb, ir, params, record_trace=True)
    assert fused.shape[2:] == (h, w)
    for m in (tr.attention["rgb"], tr.attention["ir"], tr.excitation):
        assert np.all(m.data > 0) and np.all(m.data < 1)



def test_attention_starts_neutral(params, rng):
    rgb, ir = _inputs(rng, 1, 8, 8)
    _, tr = meaf_forward(rgb, ir, params, record_trace=True)
    for m in ("rgb", "ir"):
        assert np.all(tr.attention[m].data == 0.5)
