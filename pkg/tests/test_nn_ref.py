"""Forward-pass engine tests, pinned against a naive loop convolution."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrd import nn_ref
from lrd.nn_ref import ConvLayer, LinearLayer, ReluLayer, conv2d, linear, run_stack


def conv2d_loop(x, w, stride=1, padding=0):
    """Quadruple-loop cross-correlation oracle (groups=1)."""
    b, c, h, width = x.shape
    _, s, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (width + 2 * padding - k) // stride + 1
    out = np.zeros((b, s, h_out, w_out))
    for bi in range(b):
        for so in range(s):
            for i in range(h_out):
                for j in range(w_out):
                    patch = x[bi, :, i * stride:i * stride + k,
                              j * stride:j * stride + k]
                    out[bi, so, i, j] = np.sum(patch * w[:, so])
    return out


@settings(max_examples=25, deadline=None)
@given(
    c=st.integers(1, 4), s=st.integers(1, 4), k=st.integers(1, 3),
    stride=st.integers(1, 2), padding=st.integers(0, 2),
    hw=st.integers(3, 6), seed=st.integers(0, 2**31),
)
def test_conv2d_matches_loop_oracle(c, s, k, stride, padding, hw, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c, hw, hw))
    w = rng.standard_normal((c, s, k, k))
    got = conv2d(x, w, stride, padding)
    np.testing.assert_allclose(got, conv2d_loop(x, w, stride, padding), atol=1e-10)


def test_grouped_conv_equals_block_diagonal_full_conv():
    rng = np.random.default_rng(0)
    c, s, g, k = 6, 4, 2, 3
    x = rng.standard_normal((2, c, 5, 5))
    wg = rng.standard_normal((c // g, s, k, k))
    full = np.zeros((c, s, k, k))
    for j in range(g):
        full[j * (c // g):(j + 1) * (c // g), j * (s // g):(j + 1) * (s // g)] = \
            wg[:, j * (s // g):(j + 1) * (s // g)]
    np.testing.assert_allclose(
        conv2d(x, wg, groups=g), conv2d(x, full), atol=1e-10
    )


def test_conv2d_bias():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 3, 1, 1))
    b = rng.standard_normal(3)
    np.testing.assert_allclose(
        conv2d(x, w, bias=b), conv2d(x, w) + b.reshape(1, 3, 1, 1), atol=1e-12
    )


def test_conv2d_linearity():
    rng = np.random.default_rng(2)
    x1 = rng.standard_normal((1, 3, 5, 5))
    x2 = rng.standard_normal((1, 3, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_allclose(
        conv2d(2 * x1 + x2, w), 2 * conv2d(x1, w) + conv2d(x2, w), atol=1e-10
    )


def test_1x1_conv_equals_linear_per_pixel():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 4, 4))
    w = rng.standard_normal((5, 3))
    via_conv = conv2d(x, w[:, :, None, None])
    # move channels last, apply the matrix, move back
    via_lin = np.einsum("bchw,cs->bshw", x, w)
    np.testing.assert_allclose(via_conv, via_lin, atol=1e-12)


def test_conv2d_shape_validation():
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 4, 5, 5)), np.zeros((3, 2, 1, 1)))
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 4, 2, 2)), np.zeros((4, 2, 3, 3)))  # collapses
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 4, 5, 5)), np.zeros((4, 3, 1, 1)), groups=2)


def test_linear_matches_matmul_and_bias():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 6))
    w = rng.standard_normal((6, 4))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(linear(x, w, b), x @ w + b, atol=1e-12)


def test_linear_flattens_feature_maps():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 2, 2))
    w = rng.standard_normal((12, 5))
    np.testing.assert_allclose(linear(x, w), x.reshape(2, -1) @ w, atol=1e-12)


def test_run_stack_reports_failing_index():
    layers = [LinearLayer(np.ones((4, 3))), LinearLayer(np.ones((5, 2)))]
    with pytest.raises(ValueError, match="stack entry 1"):
        run_stack(layers, np.ones((1, 4)))


def test_relu_layer():
    x = np.array([[-1.0, 2.0]])
    np.testing.assert_array_equal(ReluLayer()(x), [[0.0, 2.0]])


def test_conv_layer_dataclass_callable():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    layer = ConvLayer(w, stride=1, padding=1)
    np.testing.assert_allclose(layer(x), conv2d(x, w, 1, 1), atol=1e-12)


def test_nonfinite_input_rejected():
    x = np.full((1, 1, 2, 2), np.nan)
    with pytest.raises(ValueError):
        nn_ref.as_feature_map(x)
