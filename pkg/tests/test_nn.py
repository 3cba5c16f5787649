import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmsc.errors import ContractError, UsageError
from cmsc.nn import (
    GELU,
    BatchNorm,
    ChannelScale,
    Conv2d,
    ConvNeXtBlock,
    Deconv2d,
    Dense,
    GlobalAvgPool,
    LayerNorm,
    ParamStore,
    ReLU,
    ResidualAdd,
    SEBlock,
    Sigmoid,
    adam_step,
    backward,
    check_module,
    forward,
)


def sliding_window_conv(x, k, bias=0.0, pad=1):
    """Single-channel 2-D cross-correlation by explicit loops."""
    h, w = x.shape
    kh, kw = k.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad))
    xp[pad:pad + h, pad:pad + w] = x
    out = np.zeros((h + 2 * pad - kh + 1, w + 2 * pad - kw + 1))
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            total = bias
            for i in range(kh):
                for j in range(kw):
                    total += xp[r + i, c + j] * k[i, j]
            out[r, c] = total
    return out


def test_relu_forward():
    out = ReLU().forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


def test_relu_backward_subgradient():
    layer = ReLU()
    x = np.array([2.0, -1.0, 0.0])
    layer.forward(x)
    np.testing.assert_array_equal(layer.backward(np.ones(3)), [1.0, 0.0, 0.0])


def test_identity_1x1_conv():
    conv = Conv2d(1, 1, 1)
    conv.params["weight"][:] = 1.0
    x = np.random.default_rng(1).standard_normal((2, 5, 6, 1))
    np.testing.assert_array_equal(conv.forward(x), x)


def test_3x3_conv_matches_sliding_window():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 4))
    k = rng.standard_normal((3, 3))
    conv = Conv2d(1, 1, 3, padding=1)
    conv.params["weight"][:, :, 0, 0] = k
    conv.params["bias"][:] = 0.25
    out = conv.forward(x[None, :, :, None])[0, :, :, 0]
    np.testing.assert_allclose(out, sliding_window_conv(x, k, 0.25), atol=1e-12)


def test_depthwise_conv_matches_per_channel_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 6, 5, 3))
    conv = Conv2d(3, 3, 3, padding=1, groups=3, rng=rng)
    out = conv.forward(x)
    for c in range(3):
        ref = sliding_window_conv(x[0, :, :, c], conv.params["weight"][:, :, 0, c])
        np.testing.assert_allclose(out[0, :, :, c], ref, atol=1e-12)


def test_conv_stride_output_shape():
    conv = Conv2d(2, 3, 3, stride=2, padding=1)
    assert conv.forward(np.zeros((1, 7, 8, 2))).shape == (1, 4, 4, 3)


def test_deconv_shape_and_adjointness():
    rng = np.random.default_rng(5)
    conv = Conv2d(3, 2, 3, stride=2, padding=1, rng=rng)
    deconv = Deconv2d(2, 3, 3, stride=2, padding=1)
    deconv.params["weight"][:] = conv.params["weight"].transpose(0, 1, 3, 2)
    x = rng.standard_normal((1, 7, 7, 3))
    y = rng.standard_normal((1, 4, 4, 2))
    # <conv(x), y> == <x, deconv(y)> for bias-free maps
    lhs = np.sum(conv.forward(x) * y)
    rhs = np.sum(x * deconv.forward(y))
    assert deconv.forward(y).shape == x.shape
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_dense_weight_gradient_hand_expansion():
    layer = Dense(2, 2, bias=False)
    layer.params["weight"][:] = [[1.0, 2.0], [3.0, 4.0]]
    x = np.array([[5.0, 7.0]])
    layer.forward(x)
    layer.zero_grad()
    gin = layer.backward(np.array([[1.0, -2.0]]))
    np.testing.assert_allclose(layer.grads["weight"], [[5.0, 7.0], [-10.0, -14.0]])
    np.testing.assert_allclose(gin, [[1.0 - 6.0, 2.0 - 8.0]])


def test_shape_mismatch_names_layer():
    with pytest.raises(ContractError, match="conv2d.*3 input channels"):
        Conv2d(3, 4, 3).forward(np.zeros((1, 5, 5, 2)))


def test_backward_without_forward_is_usage_error():
    with pytest.raises(UsageError):
        backward(Dense(2, 2), np.zeros((1, 2)), np.zeros((1, 2)))


def test_functional_forward_backward():
    layer = Dense(3, 2, rng=np.random.default_rng(0))
    x = np.ones((4, 3))
    y = forward(layer, x)
    gin, grads = backward(layer, x, np.ones_like(y))
    assert gin.shape == x.shape and set(grads) == {"weight", "bias"}
    np.testing.assert_allclose(grads["bias"], [4.0, 4.0])


def _layer_cases():
    rng = np.random.default_rng(11)
    shape = (2, 5, 6, 4)
    x = rng.standard_normal(shape)
    bn = BatchNorm(4)
    bn_eval = BatchNorm(4)
    bn_eval.buffers["running_mean"][:] = rng.standard_normal(4)
    bn_eval.buffers["running_var"][:] = rng.uniform(0.5, 2.0, 4)
    bn_eval.eval()
    for m in (bn, bn_eval):
        m.params["gamma"][:] = rng.uniform(0.5, 1.5, 4)
        m.params["beta"][:] = rng.standard_normal(4)
    ln = LayerNorm(4)
    ln.params["gamma"][:] = rng.uniform(0.5, 1.5, 4)
    return [
        ("conv2d", Conv2d(4, 3, 3, padding=1, rng=rng), x),
        ("conv2d-strided", Conv2d(4, 2, 3, stride=2, padding=1, rng=rng), x),
        ("conv2d-depthwise", Conv2d(4, 4, 3, padding=1, groups=4, rng=rng), x),
        ("deconv2d", Deconv2d(4, 3, 3, stride=2, padding=1, rng=rng), x),
        ("dense", Dense(4, 3, rng=rng), x),
        ("batchnorm-train", bn, x),
        ("batchnorm-eval", bn_eval, x),
        ("relu", ReLU(), x),
        ("gelu", GELU(), x),
        ("sigmoid", Sigmoid(), x),
        ("global-avg-pool", GlobalAvgPool(), x),
        ("layernorm", ln, x),
        ("residual-add", ResidualAdd(), (x, rng.standard_normal(shape))),
        ("channel-scale", ChannelScale(), (x, rng.standard_normal((2, 4)))),
        ("se-block", SEBlock(4, 4, rng=rng), x),
        ("convnext-block", ConvNeXtBlock(4, kernel_size=3, rng=rng), x),
    ]


@pytest.mark.parametrize("name,layer,x", _layer_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_gradients_match_finite_differences(name, layer, x):
    errors = check_module(layer, x)
    assert max(errors.values()) < 1e-4, errors


def test_convnext_default_kernel_gradcheck():
    rng = np.random.default_rng(2)
    block = ConvNeXtBlock(4, rng=rng)
    errors = check_module(block, rng.standard_normal((1, 6, 6, 4)))
    assert max(errors.values()) < 1e-4, errors


def test_se_forced_unity_is_identity():
    block = SEBlock(8)
    block.params  # children own the weights
    block.fc2.params["weight"][:] = 0.0
    block.fc2.params["bias"][:] = 50.0
    x = np.random.default_rng(0).standard_normal((1, 4, 4, 8))
    np.testing.assert_allclose(block.forward(x), x, atol=1e-6)


def test_se_zero_input():
    block = SEBlock(8, rng=np.random.default_rng(1))
    out = block.forward(np.zeros((1, 4, 4, 8)))
    np.testing.assert_array_equal(out, 0.0)


def test_se_matches_pool_mlp_scale_oracle():
    rng = np.random.default_rng(9)
    block = SEBlock(8, rng=rng)
    for child in (block.fc1, block.fc2):
        child.params["bias"][:] = rng.standard_normal(child.params["bias"].shape)
    x = rng.standard_normal((1, 4, 4, 8))
    pooled = x[0].reshape(-1, 8).mean(axis=0)
    hidden = np.maximum(block.fc1.params["weight"] @ pooled + block.fc1.params["bias"], 0.0)
    scale = 1.0 / (1.0 + np.exp(-(block.fc2.params["weight"] @ hidden + block.fc2.params["bias"])))
    np.testing.assert_allclose(block.forward(x)[0], x[0] * scale, atol=1e-12)


def test_se_reduction_must_divide():
    with pytest.raises(ContractError):
        SEBlock(6, 4)


def test_convnext_zero_project_is_identity():
    block = ConvNeXtBlock(16, rng=np.random.default_rng(0))
    block.project.params["weight"][:] = 0.0
    x = np.random.default_rng(1).standard_normal((1, 32, 32, 16))
    out = block.forward(x)
    assert out.shape == (1, 32, 32, 16)
    np.testing.assert_array_equal(out, x)


def test_convnext_small_map_without_padding():
    with pytest.raises(ContractError):
        ConvNeXtBlock(4, padding=0).forward(np.zeros((1, 5, 9, 4)))


def test_deterministic_forward():
    def build():
        return ConvNeXtBlock(4, rng=np.random.default_rng(7))
    x = np.random.default_rng(3).standard_normal((2, 8, 8, 4))
    assert np.array_equal(build().forward(x), build().forward(x))


def test_adam_first_step():
    store = ParamStore()
    store.add("w", np.zeros(1))
    adam_step(store, {"w": np.ones(1)}, 0.1)
    assert store.params["w"][0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-12)


def test_adam_frozen_parameter_untouched():
    store = ParamStore()
    store.add("w", np.arange(3.0), frozen=True)
    before = store.params["w"].copy()
    adam_step(store, {"w": np.ones(3)}, 0.5)
    assert np.array_equal(store.params["w"], before)


def test_adam_zero_gradient():
    store = ParamStore()
    store.add("w", np.full(2, 0.3))
    adam_step(store, {"w": np.zeros(2)}, 0.1)
    assert np.array_equal(store.params["w"], [0.3, 0.3])
    np.testing.assert_array_equal(store.state["w"].m, 0.0)


def test_adam_unknown_key():
    store = ParamStore()
    store.add("w", np.zeros(1))
    with pytest.raises(KeyError):
        adam_step(store, {"v": np.zeros(1)}, 0.1)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_all_frozen_store_is_invariant(steps, seed):
    rng = np.random.default_rng(seed)
    block = SEBlock(4, rng=rng)
    store = ParamStore.from_modules({"se": block})
    store.set_frozen(None, True)
    before = store.snapshot()
    for _ in range(steps):
        adam_step(store, {k: rng.standard_normal(v.shape) for k, v in store.params.items()}, 1e-2)
    assert all(np.array_equal(before[k], store.params[k]) for k in before)
