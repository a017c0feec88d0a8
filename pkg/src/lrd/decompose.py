"""Layer decomposition: SVD two-layer factors for FC / 1x1 layers and
Tucker-2 three-layer factors for k x k convolutions.

A decomposed k x k conv becomes a stack
``1x1 (C -> r1)  ->  k x k core (r1 -> r2)  ->  1x1 (r2 -> S)``;
the kernel axes are never decomposed, only the two channel modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    MODE_C,
    MODE_S,
    as_matrix,
    as_tensor4,
    mode_product,
    truncated_svd,
    unfold,
)


@dataclass(frozen=True)
class SvdFactors:
    """Balanced-sqrt SVD factors: W0 = U' sqrt(S'), W1 = sqrt(S') V'^T."""

    w0: np.ndarray  # C x R
    w1: np.ndarray  # R x S
    rank: int

    def param_count(self) -> int:
        return self.w0.size + self.w1.size


@dataclass(frozen=True)
class TuckerFactors:
    """Tucker-2 factors of a (C, S, k, k) tensor."""

    first: np.ndarray  # C x r1, orthonormal columns from HOSVD
    core: np.ndarray   # r1 x r2 x k x k
    last: np.ndarray   # r2 x S, rows orthonormal from HOSVD
    ranks: tuple[int, int]

    def param_count(self) -> int:
        return self.first.size + self.core.size + self.last.size


@dataclass(frozen=True)
class DecomposedLayer:
    """One original layer and the factor stack that replaces it.

    ``factors is None`` means passthrough (the original layer is kept).
    ``frozen_mask`` has one flag per factor layer, in forward order.
    """

    name: str
    original: np.ndarray
    factors: SvdFactors | TuckerFactors | None = None
    frozen_mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        n = factor_layer_count(self.factors)
        mask = self.frozen_mask or tuple(False for _ in range(n))
        if len(mask) != n:
            raise ValueError(
                f"frozen_mask length {len(self.frozen_mask)} != {n} factor layers"
            )
        object.__setattr__(self, "frozen_mask", tuple(mask))


def factor_layer_count(factors) -> int:
    if factors is None:
        return 0
    if isinstance(factors, SvdFactors):
        return 2
    if isinstance(factors, TuckerFactors):
        return 3
    raise TypeError(f"unknown factor type {type(factors)!r}")


def decompose_svd(w: np.ndarray, rank: int) -> SvdFactors:
    """Split a C x S matrix into W0 (C x R) @ W1 (R x S) via truncated SVD,
    with sqrt-of-singular-values balancing between the two factors."""
    w = as_matrix(w)
    res = truncated_svd(w, rank)
    root = np.sqrt(res.sigma)
    return SvdFactors(w0=res.u * root, w1=root[:, None] * res.v.T, rank=rank)


def decompose_tucker2(
    w: np.ndarray,
    r1: int,
    r2: int,
    hooi_sweeps: int = 0,
    hooi_tol: float = 1e-9,
) -> TuckerFactors:
    """Tucker-2 decomposition of a (C, S, k, k) tensor by truncated HOSVD.

    ``first`` holds the leading r1 left singular vectors of the C-mode
    unfolding, ``last`` the leading r2 of the S-mode unfolding, and the core
    is the projection of ``w`` onto those subspaces.  With ``hooi_sweeps > 0``
    the subspaces are refined by alternating orthogonal iteration; the
    refinement never increases the reconstruction error.
    """
    w = as_tensor4(w)
    c, s, h, kw = w.shape
    if h != kw:
        raise ValueError(f"non-square kernel {h}x{kw}")
    if not 1 <= r1 <= c:
        raise ValueError(f"r1={r1} out of range [1, {c}]")
    if not 1 <= r2 <= s:
        raise ValueError(f"r2={r2} out of range [1, {s}]")

    u1 = truncated_svd(unfold(w, MODE_C), r1).u
    u2 = truncated_svd(unfold(w, MODE_S), r2).u

    def core_of(a, b):
        return mode_product(mode_product(w, a.T, MODE_C), b.T, MODE_S)

    def err_of(a, b):
        rec = mode_product(mode_product(core_of(a, b), a, MODE_C), b, MODE_S)
        return np.linalg.norm(w - rec)

    best = err_of(u1, u2)
    for _ in range(hooi_sweeps):
        # alternate: refit each factor against the other's projection
        proj = mode_product(w, u2.T, MODE_S)
        u1_new = truncated_svd(unfold(proj, MODE_C), r1).u
        proj = mode_product(w, u1_new.T, MODE_C)
        u2_new = truncated_svd(unfold(proj, MODE_S), r2).u
        err = err_of(u1_new, u2_new)
        if err > best:
            break
        u1, u2 = u1_new, u2_new
        if best - err < hooi_tol:
            best = err
            break
        best = err

    return TuckerFactors(first=u1, core=core_of(u1, u2), last=u2.T, ranks=(r1, r2))


def reconstruct(d: DecomposedLayer | SvdFactors | TuckerFactors) -> np.ndarray:
    """Reassemble the weights a factor stack represents."""
    if isinstance(d, DecomposedLayer):
        if d.factors is None:
            return d.original
        return reconstruct(d.factors)
    if isinstance(d, SvdFactors):
        return d.w0 @ d.w1
    if isinstance(d, TuckerFactors):
        return mode_product(mode_product(d.core, d.first, MODE_C), d.last.T, MODE_S)
    raise TypeError(f"cannot reconstruct {type(d)!r}")


def relative_error(original: np.ndarray, reconstructed: np.ndarray) -> float:
    """Frobenius-relative reconstruction error.

    A zero original is defined to have error 0 against a zero reconstruction
    and +inf against anything else.
    """
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if original.shape != reconstructed.shape:
        raise ValueError(
            f"shape mismatch: {original.shape} vs {reconstructed.shape}"
        )
    denom = np.linalg.norm(original)
    diff = np.linalg.norm(original - reconstructed)
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / denom)
