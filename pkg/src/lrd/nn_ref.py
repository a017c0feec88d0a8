"""Reference forward-pass engine: conv2d (stride / padding / groups) and
linear layers over NCHW float64 feature maps.

Cross-correlation convention, no kernel flip.  Weight tensors follow the
package-wide ``(C_in, S_out, h, w)`` layout; for grouped convolution the
weight is ``(C_in / groups, S_out, h, w)`` and output channel ``s`` belongs
to group ``s // (S_out / groups)``.

The implementation is im2col + matmul; tests pin it against a naive
quadruple-loop convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import as_matrix, as_tensor4


def as_feature_map(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected NCHW feature map, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature map contains non-finite entries")
    return x


def conv_out_hw(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, H_out*W_out) patch matrix."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = conv_out_hw(h, k, stride, padding)
    w_out = conv_out_hw(w, k, stride, padding)
    sb, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, k, k, h_out, w_out),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return patches.reshape(b, c * k * k, h_out * w_out), h_out, w_out


def conv2d(
    x: np.ndarray,
    w: np.ndarray,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """2-D cross-correlation of an NCHW batch with a (C/g, S, h, w) weight."""
    x = as_feature_map(x)
    w = as_tensor4(w)
    b, c, h, width = x.shape
    cg, s, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"non-square kernel {kh}x{kw}")
    if c % groups or s % groups:
        raise ValueError(f"groups={groups} must divide channels ({c}, {s})")
    if cg != c // groups:
        raise ValueError(
            f"weight expects {cg} input channels per group, input has "
            f"{c}//{groups} = {c // groups}"
        )
    h_out = conv_out_hw(h, kh, stride, padding)
    w_out = conv_out_hw(width, kh, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ValueError("output spatial dims collapse to zero")

    sg = s // groups
    out = np.empty((b, s, h_out, w_out))
    for g in range(groups):
        xg = x[:, g * cg:(g + 1) * cg]
        wg = w[:, g * sg:(g + 1) * sg]
        cols, _, _ = _im2col(xg, kh, stride, padding)
        # (S_g, C_g*k*k) @ (B, C_g*k*k, P) -> (B, S_g, P)
        kernel = wg.transpose(1, 0, 2, 3).reshape(sg, cg * kh * kw)
        out[:, g * sg:(g + 1) * sg] = (kernel @ cols).reshape(b, sg, h_out, w_out)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, s, 1, 1)
    return out


def linear(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map of flattened feature maps: rows of x times (C x S) weight."""
    w = as_matrix(w)
    x = np.ascontiguousarray(x, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1) if x.ndim > 2 else x
    if flat.shape[1] != w.shape[0]:
        raise ValueError(f"linear mismatch: input {flat.shape} vs weight {w.shape}")
    out = flat @ w
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass(frozen=True)
class ConvLayer:
    weight: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: np.ndarray | None = None

    def __call__(self, x):
        return conv2d(x, self.weight, self.stride, self.padding, self.groups, self.bias)


@dataclass(frozen=True)
class LinearLayer:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class ReluLayer:
    def __call__(self, x):
        return relu(x)


def run_stack(layers, x):
    """Apply layers left to right; no implicit nonlinearities."""
    for i, layer in enumerate(layers):
        try:
            x = layer(x)
        except ValueError as exc:
            raise ValueError(f"stack entry {i}: {exc}") from exc
    return x
