"""Acceleration transforms over decomposed layers: merging adjacent 1x1
convolutions, freezing factors with a least-squares core refit, and splitting
Tucker factors into N grouped branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .decompose import SvdFactors, TuckerFactors, reconstruct
from .planner import CompressionPlan, PlanEntry, decomposed_flops, decomposed_params
from .tensor_core import MODE_C, MODE_S, as_matrix, mode_product


# --- layer merging -----------------------------------------------------------

def merge_1x1(wa: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """Fuse two adjacent 1x1 convs / FC layers (C x R then R x S) into one.

    Only valid when no nonlinearity sits between the pair; the caller
    asserts that.  Merging also compresses iff R > C*S / (C + S).
    """
    wa = as_matrix(wa)
    wb = as_matrix(wb)
    if wa.shape[1] != wb.shape[0]:
        raise ValueError(f"cannot merge {wa.shape} with {wb.shape}")
    return wa @ wb


def _mergeable_neighbor(entry: PlanEntry) -> bool:
    spec = entry.spec
    return (
        spec.kind == "conv"
        and spec.k == 1
        and spec.stride == 1
        and not spec.skip_branch
        and entry.decision["type"] in ("passthrough", "svd")
    )


def merge_plan(plan: CompressionPlan) -> CompressionPlan:
    """Absorb each Tucker entry's 1x1 factors into neighbouring 1x1 convs.

    A (1x1 conv) directly before a Tucker entry merges with the Tucker first
    factor when no nonlinearity separates them; likewise the last factor
    merges into a directly following 1x1.  On bottleneck models this restores
    the original layer count.  Entries that match no pattern are unchanged.
    """
    entries = [replace(e) for e in plan.entries]
    # work over the main chain only; skip-branch entries do not interrupt
    chain = [i for i, e in enumerate(entries) if not e.spec.skip_branch]
    for pos, i in enumerate(chain):
        e = entries[i]
        if e.decision["type"] != "tucker":
            continue
        r1, r2 = e.decision["r1"], e.decision["r2"]
        prev = entries[chain[pos - 1]] if pos > 0 else None
        nxt = entries[chain[pos + 1]] if pos + 1 < len(chain) else None
        merged_any = False
        if prev is not None and _mergeable_neighbor(prev) and not prev.spec.relu_after:
            prev.decision = {"type": "merged_first", "rank": r1, "into": e.spec.name}
            _refresh(prev)
            merged_any = True
        if nxt is not None and _mergeable_neighbor(nxt) and not e.spec.relu_after:
            nxt.decision = {"type": "merged_last", "rank": r2, "from": e.spec.name}
            _refresh(nxt)
            merged_any = True
        if merged_any:
            e.decision = {"type": "tucker_core", "r1": r1, "r2": r2}
            _refresh(e)
    merged = CompressionPlan(
        model=plan.model,
        alpha=plan.alpha,
        beta=plan.beta,
        policy=plan.policy,
        transform="merge",
        entries=entries,
    )
    return merged


def _refresh(entry: PlanEntry) -> None:
    entry.params_after = decomposed_params(entry.spec, entry.decision)
    entry.flops_after = decomposed_flops(entry.spec, entry.decision)
    entry.counted_after = 1 if entry.spec.counted else 0


def merge_weights(
    w_prev: np.ndarray, factors: TuckerFactors, w_next: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weights of a merged bottleneck: (prev @ first, core, last @ next)."""
    return (
        merge_1x1(w_prev, factors.first),
        factors.core,
        merge_1x1(factors.last, w_next),
    )


# --- freezing + least-squares refit -----------------------------------------

def _is_orthonormal(m: np.ndarray, tol: float = 1e-8) -> bool:
    g = m.T @ m
    return np.max(np.abs(g - np.eye(g.shape[0]))) <= tol


def freeze_and_refit(
    w_orig: np.ndarray,
    f: TuckerFactors,
    frozen: frozenset[str] = frozenset({"first", "last"}),
) -> TuckerFactors:
    """Keep the factor matrices fixed and refit the core to ``w_orig`` by
    least squares.

    For orthonormal factors the minimizer is the closed-form projection
    ``core = w ×_C first^T ×_S last``; otherwise pseudo-inverses solve the
    normal equations.  The refit never increases the reconstruction error.
    """
    if not frozen <= {"first", "last"}:
        raise ValueError(f"unknown frozen factors {set(frozen) - {'first', 'last'}}")
    first, last = f.first, f.last
    proj_c = first.T if _is_orthonormal(first) else np.linalg.pinv(first)
    last_t = last.T  # S x r2 with orthonormal columns in the HOSVD case
    proj_s = last if _is_orthonormal(last_t) else np.linalg.pinv(last_t)
    if not np.all(np.isfinite(proj_c)) or not np.all(np.isfinite(proj_s)):
        raise ArithmeticError("singular factor matrices, cannot refit core")
    core = mode_product(mode_product(w_orig, proj_c, MODE_C), proj_s, MODE_S)
    return TuckerFactors(first=first, core=core, last=last, ranks=f.ranks)


def freeze_and_refit_svd(w_orig: np.ndarray, f: SvdFactors) -> SvdFactors:
    """SVD analog: freeze W0, refit W1 = pinv(W0) @ w_orig."""
    w1 = np.linalg.pinv(f.w0) @ as_matrix(w_orig)
    return SvdFactors(w0=f.w0, w1=w1, rank=f.rank)


# --- branching ---------------------------------------------------------------

@dataclass(frozen=True)
class BranchedTucker:
    """N parallel Tucker branches with per-branch ranks (R1, R2) = (r1/N, r2/N).

    Branch j holds the j-th contiguous column block of the factor matrices
    and the (j, j) diagonal block of the core.  The branch sum reproduces the
    vanilla reconstruction exactly when the core is block-diagonal over those
    blocks (which is what the grouped-conv form enforces); for a general core
    the off-diagonal blocks are dropped -- see
    :func:`project_core_block_diagonal`.
    """

    n: int
    branches: tuple[TuckerFactors, ...]

    @property
    def branch_ranks(self) -> tuple[int, int]:
        return self.branches[0].ranks

    def param_count(self) -> int:
        return sum(b.param_count() for b in self.branches)


def quantize_ranks(r1: int, r2: int, n: int) -> tuple[int, int]:
    """Round ranks up to the next multiple of n (never loses approximation)."""
    return n * math.ceil(r1 / n), n * math.ceil(r2 / n)


def project_core_block_diagonal(f: TuckerFactors, n: int) -> tuple[TuckerFactors, float]:
    """Zero the core's off-diagonal (R1, R2) blocks; returns the projected
    factors and the Frobenius norm of what was dropped."""
    r1, r2 = f.ranks
    _check_divides(r1, r2, n)
    b1, b2 = r1 // n, r2 // n
    core = np.zeros_like(f.core)
    for j in range(n):
        sl1 = slice(j * b1, (j + 1) * b1)
        sl2 = slice(j * b2, (j + 1) * b2)
        core[sl1, sl2] = f.core[sl1, sl2]
    dropped = float(np.linalg.norm(f.core - core))
    return TuckerFactors(first=f.first, core=core, last=f.last, ranks=f.ranks), dropped


def _check_divides(r1: int, r2: int, n: int) -> None:
    if n < 1:
        raise ValueError(f"branch count must be >= 1, got {n}")
    if r1 % n or r2 % n:
        raise ValueError(f"branch count {n} does not divide ranks ({r1}, {r2})")


def branch_tucker(f: TuckerFactors, n: int) -> BranchedTucker:
    """Split Tucker factors into n parallel branches along contiguous rank
    blocks (largest singular directions in branch 1)."""
    r1, r2 = f.ranks
    _check_divides(r1, r2, n)
    b1, b2 = r1 // n, r2 // n
    branches = []
    for j in range(n):
        sl1 = slice(j * b1, (j + 1) * b1)
        sl2 = slice(j * b2, (j + 1) * b2)
        branches.append(
            TuckerFactors(
                first=np.ascontiguousarray(f.first[:, sl1]),
                core=np.ascontiguousarray(f.core[sl1, sl2]),
                last=np.ascontiguousarray(f.last[sl2, :]),
                ranks=(b1, b2),
            )
        )
    return BranchedTucker(n=n, branches=tuple(branches))


def reconstruct_branched(b: BranchedTucker) -> np.ndarray:
    out = reconstruct(b.branches[0])
    for branch in b.branches[1:]:
        out = out + reconstruct(branch)
    return out


@dataclass(frozen=True)
class GroupedConvStack:
    """Branched Tucker as a single 1x1 -> grouped kxk -> 1x1 stack.

    ``core`` has shape (R1, N*R2, k, k): group j's kernel block maps input
    channels [j*R1, (j+1)*R1) to output channels [j*R2, (j+1)*R2).
    """

    first: np.ndarray   # C x (N*R1)
    core: np.ndarray    # R1 x (N*R2) x k x k
    last: np.ndarray    # (N*R2) x S
    groups: int

    def core_param_count(self) -> int:
        return self.core.size


def branched_to_grouped(b: BranchedTucker) -> GroupedConvStack:
    """Concatenate branch factors into one grouped-convolution stack whose
    forward pass equals the sum of the branch forwards."""
    first = np.hstack([br.first for br in b.branches])
    last = np.vstack([br.last for br in b.branches])
    r1, r2 = b.branch_ranks
    k = b.branches[0].core.shape[2]
    core = np.zeros((r1, b.n * r2, k, k))
    for j, br in enumerate(b.branches):
        core[:, j * r2:(j + 1) * r2] = br.core
    return GroupedConvStack(first=first, core=core, last=last, groups=b.n)


def tucker_stack(f: TuckerFactors, stride: int = 1, padding: int = 0):
    """The three-conv forward stack of a Tucker factorization."""
    from .nn_ref import ConvLayer

    return [
        ConvLayer(f.first[:, :, None, None]),
        ConvLayer(f.core, stride=stride, padding=padding),
        ConvLayer(f.last[:, :, None, None]),
    ]


def grouped_stack(g: GroupedConvStack, stride: int = 1, padding: int = 0):
    from .nn_ref import ConvLayer

    return [
        ConvLayer(g.first[:, :, None, None]),
        ConvLayer(g.core, stride=stride, padding=padding, groups=g.groups),
        ConvLayer(g.last[:, :, None, None]),
    ]
