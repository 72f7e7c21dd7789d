import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segtrack import nn
from helpers import naive_conv, numeric_grad, rel_error

BACKENDS = ["numpy"] + (["torch"] if nn.torch is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    old = nn.get_backend()
    nn.set_backend(request.param)
    yield request.param
    nn.set_backend(old)


def params64(c_in, c_out, k, seed=0):
    p = nn.LayerParams.kaiming(c_in, c_out, k, np.random.default_rng(seed), dtype=np.float64)
    p.bias[:] = np.random.default_rng(seed + 1).normal(size=c_out)
    return p


def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(4, 5, 6))
    p = nn.LayerParams(np.eye(4).reshape(4, 4, 1, 1), np.zeros(4))
    np.testing.assert_array_equal(nn.conv2d(x, p), x)


def test_conv_zero_weights(backend):
    x = np.random.default_rng(0).normal(size=(3, 5, 5))
    p = nn.LayerParams(np.zeros((2, 3, 3, 3)), np.zeros(2))
    assert not nn.conv2d(x, p).any()


@pytest.mark.oracle
@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_nested_loop_oracle(backend, k):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 5))
    p = params64(2, 3, k)
    np.testing.assert_allclose(nn.conv2d(x, p), naive_conv(x, p.weights, p.bias), atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        nn.conv2d(np.zeros((3, 4, 4)), params64(2, 2, 3))


def test_conv_linear_in_input(backend):
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(2, 3, 7, 7))
    p = params64(3, 4, 3)
    zero_bias = nn.LayerParams(p.weights, np.zeros(4))
    lhs = nn.conv2d(2.5 * x - 0.5 * y, zero_bias)
    rhs = 2.5 * nn.conv2d(x, zero_bias) - 0.5 * nn.conv2d(y, zero_bias)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@pytest.mark.gradient
@pytest.mark.parametrize("k", [1, 3])
def test_conv_gradients_finite_difference(backend, k):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 6, 6))
    p = params64(3, 2, k)
    proj = rng.normal(size=(2, 2, 6, 6))

    def f():
        return float((nn.conv2d(x, p) * proj).sum())

    p.zero_grad()
    gx = nn.conv2d_backward(proj, x, p)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(p.grad_weights, numeric_grad(f, p.weights)) < 1e-4
    assert rel_error(p.grad_bias, numeric_grad(f, p.bias)) < 1e-4


def test_relu_values():
    np.testing.assert_array_equal(nn.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])


def test_pelu_continuity_and_zero():
    assert nn.pelu(np.array(0.0), 2.0, 0.5) == 0
    eps = 1e-9
    assert abs(nn.pelu(np.array(eps)) - nn.pelu(np.array(-eps))) < 1e-8


@pytest.mark.gradient
@pytest.mark.parametrize("x0", [0.37, -0.37])
def test_pelu_gradient(x0):
    x = np.array([x0])
    g = nn.pelu_backward(np.ones(1), x, 1.0, 1.0)
    num = numeric_grad(lambda: float(nn.pelu(x, 1.0, 1.0).sum()), x)
    assert abs(g[0] - num[0]) / abs(num[0]) < 1e-5


def test_pelu_rejects_bad_params():
    with pytest.raises(ValueError):
        nn.pelu(np.zeros(2), 0.0, 1.0)


@pytest.mark.gradient
def test_activation_gradients_small_tensor():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 8, 8))
    proj = rng.normal(size=x.shape)
    for kind in ("relu", "pelu"):
        g = nn.activation_backward(proj, x, kind)
        num = numeric_grad(lambda: float((nn.activation(x, kind) * proj).sum()), x)
        assert rel_error(g, num) < 1e-4


def test_softmax_equal_channels():
    np.testing.assert_allclose(nn.softmax_channels(np.ones((2, 3, 3))), 0.5)


def test_softmax_ln3():
    x = np.zeros((2, 1, 1))
    x[1] = np.log(3)
    np.testing.assert_allclose(nn.softmax_channels(x)[:, 0, 0], [0.25, 0.75], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_softmax_normalized_and_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=20, size=(c, 4, 5))
    p = nn.softmax_channels(x)
    np.testing.assert_allclose(p.sum(axis=0), 1, atol=1e-12)
    assert np.all((p >= 0) & (p <= 1))
    shifted = nn.softmax_channels(x + rng.normal(size=(1, 4, 5)) * 50)
    np.testing.assert_array_equal(p.argmax(axis=0), shifted.argmax(axis=0))


def test_upsample_constant():
    x = np.full((2, 3, 4), 1.5)
    for mode in ("nearest", "bilinear"):
        y = nn.upsample2x(x, mode)
        assert y.shape == (2, 6, 8)
        np.testing.assert_allclose(y, 1.5)


def test_upsample_nearest_single_pixel():
    x = np.zeros((1, 3, 3))
    x[0, 1, 2] = 4.0
    y = nn.upsample2x(x, "nearest")
    expected = np.zeros((1, 6, 6))
    expected[0, 2:4, 4:6] = 4.0
    np.testing.assert_array_equal(y, expected)


def _bilinear_oracle(x):
    h, w = x.shape
    out = np.zeros((2 * h, 2 * w))
    for r in range(2 * h):
        for c in range(2 * w):
            sy = min(max((r + 0.5) / 2 - 0.5, 0), h - 1)
            sx = min(max((c + 0.5) / 2 - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[r, c] = ((1 - fy) * ((1 - fx) * x[y0, x0] + fx * x[y0, x1])
                         + fy * ((1 - fx) * x[y1, x0] + fx * x[y1, x1]))
    return out


def test_upsample_bilinear_ramp_oracle():
    ramp = np.add.outer(np.arange(3.0), 10 * np.arange(3.0))
    y = nn.upsample2x(ramp[None], "bilinear")[0]
    np.testing.assert_allclose(y, _bilinear_oracle(ramp), atol=1e-10)
    # interior follows the ramp exactly: value at output (r, c) is the ramp at ((r-0.5)/2, (c-0.5)/2)
    r, c = 3, 2
    assert abs(y[r, c] - ((r + 0.5) / 2 - 0.5 + 10 * ((c + 0.5) / 2 - 0.5))) < 1e-12


@pytest.mark.gradient
@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_upsample_gradient(mode):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 5))
    proj = rng.normal(size=(2, 8, 10))
    g = nn.upsample2x_backward(proj, mode)
    num = numeric_grad(lambda: float((nn.upsample2x(x, mode) * proj).sum()), x)
    assert rel_error(g, num) < 1e-4


def test_crossentropy_perfect_prediction():
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    logits = np.stack([np.where(mask, -1000.0, 1000.0), np.where(mask, 1000.0, -1000.0)])
    loss, _ = nn.crossentropy_loss(logits, mask)
    assert loss == 0.0


def test_crossentropy_uniform():
    loss, _ = nn.crossentropy_loss(np.zeros((2, 5, 5)), np.eye(5, dtype=bool))
    assert abs(loss - np.log(2)) < 1e-12


def test_crossentropy_clamps_saturated_predictions():
    mask = np.ones((2, 2), bool)
    logits = np.stack([np.full((2, 2), 1000.0), np.full((2, 2), -1000.0)])
    loss, grad = nn.crossentropy_loss(logits, mask)
    assert np.isfinite(loss) and abs(loss + np.log(nn.LOG_CLAMP)) < 1e-9
    assert np.all(np.isfinite(grad))
    # saturated wrong pixels keep the softmax gradient (p - onehot) / count
    np.testing.assert_allclose(grad[0], 0.25)
    np.testing.assert_allclose(grad[1], -0.25)


@pytest.mark.gradient
def test_crossentropy_gradient_8x8():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(2, 8, 8))
    mask = rng.random((8, 8)) > 0.5
    _, g = nn.crossentropy_loss(logits, mask)
    num = numeric_grad(lambda: nn.crossentropy_loss(logits, mask)[0], logits)
    assert rel_error(g, num) < 1e-5


def _single_param(value, grad):
    p = nn.LayerParams(np.array(value, float).reshape(1, 1, 1, 1), np.zeros(1))
    p.grad_weights[...] = grad
    return {"p": p}


def test_adam_zero_gradient_is_noop():
    params = _single_param(0.7, 0.0)
    state = nn.AdamState()
    nn.adam_step(params, state)
    assert params["p"].weights.item() == 0.7
    assert state.step_count == 1
    assert not state.first_moment["p.w"].any() and not state.second_moment["p.w"].any()


@pytest.mark.parametrize("g", [1e-3, 0.5, 40.0])
def test_adam_first_step_magnitude(g):
    params = _single_param(1.0, g)
    state = nn.AdamState(learning_rate=1e-3)
    nn.adam_step(params, state)
    # reference formula: m_hat = g, v_hat = g^2
    expected = 1.0 - 1e-3 * g / (abs(g) + 1e-8)
    assert abs(params["p"].weights.item() - expected) < 1e-12
    assert abs(1.0 - params["p"].weights.item() - 1e-3) < 1e-7


def test_adam_decay_schedule():
    state = nn.AdamState(learning_rate=1e-3, decay_factor=0.2, decay_interval_epochs=15)
    assert state.set_epoch(14) == 1e-3
    assert abs(state.set_epoch(15) - 2e-4) < 1e-18
    assert abs(state.set_epoch(30) - 4e-5) < 1e-18


def test_adam_decreases_convex_quadratic():
    rng = np.random.default_rng(9)
    target = rng.normal(size=(2, 3, 3, 3))
    p = nn.LayerParams(np.zeros((2, 3, 3, 3)), np.zeros(2))
    state = nn.AdamState(learning_rate=1e-2)

    def loss():
        return float(((p.weights - target) ** 2).sum() + (p.bias**2).sum())

    for _ in range(5):
        before = loss()
        p.zero_grad()
        p.grad_weights += 2 * (p.weights - target)
        nn.adam_step({"p": p}, state)
        assert loss() < before


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.conv": nn.LayerParams.kaiming(3, 4, 3, rng), "b": nn.LayerParams.kaiming(4, 2, 1, rng)}
    path = tmp_path / "w.bin"
    nn.save_checkpoint(path, params)
    fresh = {"a.conv": nn.LayerParams.kaiming(3, 4, 3, rng), "b": nn.LayerParams.kaiming(4, 2, 1, rng)}
    nn.load_checkpoint(path, fresh)
    for k in params:
        np.testing.assert_array_equal(params[k].weights, fresh[k].weights)
    raw = path.read_bytes()
    assert raw[:8] == b"SEGTRKCK"
    assert int.from_bytes(raw[8:12], "little") == nn.FORMAT_VERSION


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "w.bin"
    nn.save_tensors(path, {"x": np.zeros(3)})
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(nn.CheckpointError):
        nn.load_tensors(path)


def test_checkpoint_shape_mismatch(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "w.bin"
    nn.save_checkpoint(path, {"a": nn.LayerParams.kaiming(3, 4, 3, rng)})
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(path, {"a": nn.LayerParams.kaiming(3, 5, 3, rng)})
