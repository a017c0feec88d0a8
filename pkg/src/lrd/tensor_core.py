"""Dense 4-D weight tensors: mode unfoldings, multilinear products, SVD kernels.

Conventions used throughout the package:

* A weight tensor has shape ``(C, S, h, w)`` -- input channels, output
  channels, kernel rows, kernel cols.  Fully connected and 1x1 layers are the
  degenerate case ``h == w == 1``.
* Unfolding layout: the C-mode unfolding is ``C x (S*h*w)`` with row ``c``
  ordered by ``(s, kh, kw)`` lexicographic; the S-mode unfolding is
  ``S x (C*h*w)`` with row ``s`` ordered by ``(c, kh, kw)``.
* All numerics are float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MODE_C = "C"
MODE_S = "S"
_MODES = (MODE_C, MODE_S)


class DimensionError(ValueError):
    """Shape or mode mismatch in a tensor operation."""


def as_tensor4(data) -> np.ndarray:
    """Validate and return a finite float64 array of rank 4."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if t.ndim != 4:
        raise DimensionError(f"expected a 4-D tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite entries")
    return t


def as_matrix(data) -> np.ndarray:
    """Validate and return a finite float64 array of rank 2."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def unfold(t: np.ndarray, mode: str) -> np.ndarray:
    """Unfold a (C, S, h, w) tensor along the C or S channel mode."""
    t = as_tensor4(t)
    if mode == MODE_C:
        return t.reshape(t.shape[0], -1)
    if mode == MODE_S:
        return np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(t.shape[1], -1)
    raise DimensionError(f"unknown mode {mode!r}, expected one of {_MODES}")


def fold(m: np.ndarray, mode: str, dims: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse of :func:`unfold` for the given target dims."""
    m = as_matrix(m)
    c, s, h, w = dims
    if mode == MODE_C:
        if m.shape != (c, s * h * w):
            raise DimensionError(f"cannot fold {m.shape} into {dims} along C")
        return m.reshape(c, s, h, w)
    if mode == MODE_S:
        if m.shape != (s, c * h * w):
            raise DimensionError(f"cannot fold {m.shape} into {dims} along S")
        return np.ascontiguousarray(m.reshape(s, c, h, w).transpose(1, 0, 2, 3))
    raise DimensionError(f"unknown mode {mode!r}, expected one of {_MODES}")


def mode_product(t: np.ndarray, m: np.ndarray, mode: str) -> np.ndarray:
    """Multilinear product of ``t`` with matrix ``m`` along a channel mode.

    The result replaces the size of ``mode`` with ``m.shape[0]`` and equals
    ``fold(m @ unfold(t, mode), mode, new_dims)``.
    """
    t = as_tensor4(t)
    m = as_matrix(m)
    axis = 0 if mode == MODE_C else 1
    if mode not in _MODES:
        raise DimensionError(f"unknown mode {mode!r}, expected one of {_MODES}")
    if m.shape[1] != t.shape[axis]:
        raise DimensionError(
            f"mode product mismatch: matrix {m.shape} against tensor "
            f"{t.shape} along {mode}"
        )
    out = np.tensordot(m, t, axes=(1, axis))
    if mode == MODE_S:
        out = out.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class SvdResult:
    """Thin (possibly truncated) SVD with the sign convention that the first
    nonzero entry of every U column is nonnegative."""

    u: np.ndarray       # m x r
    sigma: np.ndarray   # r, nonincreasing
    v: np.ndarray       # n x r

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def _fix_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = u.copy()
    v = v.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return u, v


def svd(m: np.ndarray) -> SvdResult:
    """Full thin SVD of a matrix, ``r = min(rows, cols)`` components."""
    m = as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ArithmeticError(f"SVD did not converge: {exc}") from exc
    u, v = _fix_signs(u, vt.T)
    return SvdResult(u=u, sigma=s, v=v)


def truncated_svd(m: np.ndarray, rank: int) -> SvdResult:
    """First ``rank`` singular triplets of ``m`` (optimal Frobenius rank-R
    approximation by Eckart-Young)."""
    m = as_matrix(m)
    full = min(m.shape)
    if not 1 <= rank <= full:
        raise ValueError(f"rank {rank} out of range [1, {full}]")
    res = svd(m)
    return SvdResult(
        u=np.ascontiguousarray(res.u[:, :rank]),
        sigma=res.sigma[:rank].copy(),
        v=np.ascontiguousarray(res.v[:, :rank]),
    )


# --- serialization -----------------------------------------------------------

_HEADER = struct.Struct("<4I")


def save_tensor(path, t: np.ndarray) -> None:
    """Write a tensor as 4 little-endian u32 dims followed by f64 data."""
    t = as_tensor4(t)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*t.shape))
        fh.write(t.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"truncated tensor file: {path}")
    dims = _HEADER.unpack_from(raw)
    n = dims[0] * dims[1] * dims[2] * dims[3]
    body = raw[_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(
            f"tensor file {path} dims {dims} expect {8 * n} payload bytes, "
            f"got {len(body)}"
        )
    data = np.frombuffer(body, dtype="<f8").reshape(dims).copy()
    return as_tensor4(data)


def save_matrix(path, m: np.ndarray) -> None:
    m = as_matrix(m)
    save_tensor(path, m.reshape(m.shape[0], m.shape[1], 1, 1))


def load_matrix(path) -> np.ndarray:
    t = load_tensor(path)
    if t.shape[2:] != (1, 1):
        raise ValueError(f"file {path} holds a {t.shape} tensor, not a matrix")
    return t.reshape(t.shape[0], t.shape[1])


def tensor_to_json(t: np.ndarray) -> str:
    t = as_tensor4(t)
    return json.dumps({"dims": list(t.shape), "data": t.ravel().tolist()})


def tensor_from_json(text: str) -> np.ndarray:
    obj = json.loads(text)
    dims = tuple(obj["dims"])
    return as_tensor4(np.asarray(obj["data"], dtype=np.float64).reshape(dims))
