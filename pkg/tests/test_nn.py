import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from critart import autodiff as ad
from critart.autodiff import Tensor, grad_check
from critart.nn import DenseLayer, TransformerEncoder, min_max_normalize, sinusoidal_table, ste_replace


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def test_dense_layer_init_bounds(rng):
    layer = DenseLayer(16, 4, rng)
    assert layer.weight.shape == (16, 4) and layer.bias.shape == (4,)
    assert np.all(np.abs(layer.weight.data) <= 0.25)
    assert len(list(layer.named_parameters())) == 2


def test_dense_layer_gradient(rng):
    layer = DenseLayer(5, 3, rng)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w = rng.normal(size=(4, 3))
    assert grad_check(lambda: ad.sum(ad.mul(layer(x), w)), [x, layer.weight, layer.bias]) < 1e-6


def test_sinusoidal_table():
    table = sinusoidal_table(10, 8)
    assert table.shape == (10, 8)
    assert np.array_equal(table[0, 0::2], np.zeros(4)) and np.array_equal(table[0, 1::2], np.ones(4))


def test_encoder_shape_and_errors(rng):
    enc = TransformerEncoder(13, d_model=8, n_heads=2, d_ff=16, n_layers=2, max_len=20, rng=rng)
    assert enc(Tensor(rng.normal(size=(7, 13)))).shape == (7, 8)
    assert enc(Tensor(rng.normal(size=(3, 7, 13))), np.ones((3, 7))).shape == (3, 7, 8)
    with pytest.raises(ValueError, match="positional"):
        enc(Tensor(rng.normal(size=(21, 13))))
    with pytest.raises(ValueError, match="13 input features"):
        enc(Tensor(rng.normal(size=(4, 12))))
    with pytest.raises(ValueError, match="divisible"):
        TransformerEncoder(13, d_model=9, n_heads=2)


def test_encoder_prefix_invariant_to_padding(rng):
    enc = TransformerEncoder(13, d_model=8, n_heads=2, d_ff=16, n_layers=2, rng=rng)
    x = rng.normal(size=(1, 9, 13))
    mask = np.zeros((1, 9))
    mask[0, :5] = 1
    y = x.copy()
    y[0, 5:] = rng.normal(size=(4, 13)) * 100
    a = enc(Tensor(x), mask).data[0, :5]
    b = enc(Tensor(y), mask).data[0, :5]
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_encoder_gradient(rng):
    enc = TransformerEncoder(4, d_model=8, n_heads=2, d_ff=16, n_layers=1, rng=rng)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    mask = np.array([[1, 1, 1], [1, 1, 0]])
    w = rng.normal(size=(2, 3, 8)) * mask[..., None]
    params = [x] + enc.parameters()
    assert grad_check(lambda: ad.sum(ad.mul(enc(x, mask), w)), params) < 1e-5


# --- min-max normalisation ---------------------------------------------------


def test_min_max_affine_frame():
    out = min_max_normalize(Tensor(np.arange(12.0)[None]))
    assert np.allclose(out.data[0], np.arange(12) / 11, rtol=0, atol=1e-15)
    assert out.data[0, 0] == 0.0 and out.data[0, -1] == 1.0
    assert not out.degenerate[0]


def test_min_max_constant_frame_is_degenerate():
    out = min_max_normalize(Tensor(np.full((1, 12), 3.0), requires_grad=True))
    assert np.array_equal(out.data, np.full((1, 12), 0.5)) and out.degenerate[0]


def test_min_max_degenerate_frame_passes_no_gradient():
    raw = Tensor(np.vstack([np.full(12, 3.0), np.arange(12.0)]), requires_grad=True)
    ad.backward(ad.sum(ad.mul(min_max_normalize(raw).values, np.arange(24.0).reshape(2, 12))))
    assert np.array_equal(raw.grad[0], np.zeros(12))
    assert np.any(raw.grad[1] != 0)


def test_min_max_gradient(rng):
    raw = Tensor(rng.normal(size=(3, 4, 12)), requires_grad=True)
    w = rng.normal(size=(3, 4, 12))
    assert grad_check(lambda: ad.sum(ad.mul(min_max_normalize(raw).values, w)), [raw]) < 1e-6


def test_min_max_ties_route_to_first_index():
    raw = Tensor(np.array([[0.0, 0.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]]), requires_grad=True)
    out = min_max_normalize(raw)
    g = np.zeros((1, 12))
    g[0, 4] = 1.0  # d w4 / d r: +1 on r4, -(1-w4) on argmin, -w4 on argmax
    ad.backward(ad.sum(ad.mul(out.values, g)))
    expected = np.zeros(12)
    expected[4] = 1.0
    expected[0] = -0.5
    expected[2] = -0.5
    assert np.array_equal(raw.grad[0], expected)


def test_min_max_channel_mode_with_padding(rng):
    raw = Tensor(rng.normal(size=(2, 5, 12)), requires_grad=True)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=float)
    out = min_max_normalize(raw, "channel", mask)
    real = out.data[1, :3]
    assert np.allclose(real.min(axis=0), 0) and np.allclose(real.max(axis=0), 1)
    assert np.all(out.data[1, 3:] == 0)
    w = rng.normal(size=(2, 5, 12))
    assert grad_check(lambda: ad.sum(ad.mul(min_max_normalize(raw, "channel", mask).values, w)), [raw]) < 1e-6


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 12), elements=st.floats(-1e3, 1e3)))
def test_min_max_bounds_property(raw):
    out = min_max_normalize(Tensor(raw))
    assert np.all((out.data >= 0) & (out.data <= 1))
    for t in range(4):
        if not out.degenerate[t]:
            assert out.data[t].min() == 0.0 and out.data[t].max() == 1.0
        else:
            assert np.all(out.data[t] == 0.5)


# --- straight-through substitution -------------------------------------------


def test_ste_forward_is_ground_truth(rng):
    pred = Tensor(rng.normal(size=(6, 12)), requires_grad=True)
    gt = rng.normal(size=(6, 12))
    assert np.array_equal(ste_replace(pred, gt).data, gt)


def test_ste_backward_is_identity(rng):
    pred = Tensor(rng.normal(size=(6, 12)), requires_grad=True)
    gt_a, gt_b = rng.normal(size=(6, 12)), rng.normal(size=(6, 12))
    upstream = rng.normal(size=(6, 12))
    grads = []
    for gt in (gt_a, gt_b):
        pred.grad = None
        ad.backward(ad.sum(ad.mul(ste_replace(pred, gt), upstream)))
        grads.append(pred.grad.copy())
    assert np.array_equal(grads[0], upstream) and np.array_equal(grads[1], upstream)
    pred.grad = None
    ad.backward(ad.sum(ste_replace(pred, gt_a)))
    assert np.array_equal(pred.grad, np.ones((6, 12)))


def test_ste_fixed_point_and_ground_truth_gets_no_gradient(rng):
    pred = Tensor(rng.normal(size=(3, 12)), requires_grad=True)
    gt = Tensor(pred.data.copy(), requires_grad=True)
    out = ste_replace(pred, gt)
    assert np.array_equal(out.data, pred.data)
    ad.backward(ad.sum(out))
    assert gt.grad is None


def test_ste_shape_mismatch():
    with pytest.raises(ValueError):
        ste_replace(Tensor(np.zeros((2, 12))), np.zeros((3, 12)))
