"""Transform tests: merging, freezing with refit, branching / grouped form."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrd.decompose import (
    TuckerFactors,
    decompose_svd,
    decompose_tucker2,
    reconstruct,
    relative_error,
)
from lrd.models import load_fixture
from lrd.nn_ref import conv2d, run_stack
from lrd.planner import plan_model
from lrd.tensor_core import MODE_C, MODE_S, mode_product
from lrd.transforms import (
    branch_tucker,
    branched_to_grouped,
    freeze_and_refit,
    freeze_and_refit_svd,
    grouped_stack,
    merge_1x1,
    merge_plan,
    merge_weights,
    project_core_block_diagonal,
    quantize_ranks,
    reconstruct_branched,
    tucker_stack,
)


# --- merging -----------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.integers(1, 8), r=st.integers(1, 8),
       s=st.integers(1, 8))
def test_merge_forward_equals_sequential(seed, c, r, s):
    rng = np.random.default_rng(seed)
    wa = rng.standard_normal((c, r))
    wb = rng.standard_normal((r, s))
    x = rng.standard_normal((2, c, 3, 3))
    seq = conv2d(conv2d(x, wa[:, :, None, None]), wb[:, :, None, None])
    one = conv2d(x, merge_1x1(wa, wb)[:, :, None, None])
    np.testing.assert_allclose(one, seq, atol=1e-8)


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        merge_1x1(np.zeros((2, 3)), np.zeros((4, 2)))


def test_merge_weights_triple():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((8, 8, 3, 3))
    f = decompose_tucker2(w, 4, 4)
    prev = rng.standard_normal((6, 8))
    nxt = rng.standard_normal((8, 10))
    first, core, last = merge_weights(prev, f, nxt)
    assert first.shape == (6, 4)
    assert core.shape == (4, 4, 3, 3)
    assert last.shape == (4, 10)
    # merged stack == prev -> tucker stack -> next
    x = rng.standard_normal((1, 6, 5, 5))
    seq = run_stack([*map(lambda m: _c1(m), [prev])]
                    + tucker_stack(f, padding=1)
                    + [_c1(nxt)], x)
    merged = run_stack([_c1(first), _c1(core, pad=1), _c1(last)], x)
    np.testing.assert_allclose(merged, seq, atol=1e-8)


def _c1(m, pad=0):
    from lrd.nn_ref import ConvLayer
    if m.ndim == 2:
        m = m[:, :, None, None]
    return ConvLayer(m, padding=pad)


@pytest.mark.parametrize("name,count", [
    ("resnet50", 50), ("resnet101", 101), ("resnet152", 152),
])
def test_merge_plan_restores_layer_counts(name, count):
    model_name, layers = load_fixture(name)
    plan = merge_plan(plan_model(layers, 2.0, policy="core-only",
                                 model_name=model_name))
    t = plan.totals
    assert t["layer_count_before"] == count
    assert t["layer_count_after"] == count


def test_merge_plan_respects_relu_guard():
    # conv3 has a block-output relu, so it must never become a merged_first
    _, layers = load_fixture("resnet50")
    plan = merge_plan(plan_model(layers, 2.0, policy="core-only"))
    by_name = {e.spec.name: e for e in plan.entries}
    assert by_name["layer1.0.conv1"].decision["type"] == "merged_first"
    assert by_name["layer1.0.conv3"].decision["type"] == "merged_last"
    assert by_name["layer1.0.conv2"].decision["type"] == "tucker_core"
    # conv3 of the previous block (relu_after=True) is a merged_last for its
    # own block's conv2, never a merged_first for the next block's
    assert by_name["layer1.1.conv3"].decision["type"] == "merged_last"
    assert by_name["layer1.0.downsample"].decision["type"] == "passthrough"


def test_merge_plan_reduces_params_beyond_vanilla():
    _, layers = load_fixture("resnet50")
    vanilla = plan_model(layers, 2.0).totals
    merged = merge_plan(plan_model(layers, 2.0, policy="core-only")).totals
    assert merged["params_after"] < vanilla["params_after"]


# --- freezing + refit --------------------------------------------------------

def test_refit_equals_projection_for_orthonormal_factors():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((8, 8, 3, 3))
    f = decompose_tucker2(w, 4, 4)
    refit = freeze_and_refit(w, f)
    closed = mode_product(mode_product(w, f.first.T, MODE_C), f.last, MODE_S)
    np.testing.assert_allclose(refit.core, closed, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_refit_never_increases_error_on_perturbed_cores(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((6, 6, 3, 3))
    f = decompose_tucker2(w, 3, 3)
    perturbed = TuckerFactors(
        first=f.first,
        core=f.core + 0.3 * rng.standard_normal(f.core.shape),
        last=f.last,
        ranks=f.ranks,
    )
    before = relative_error(w, reconstruct(perturbed))
    after = relative_error(w, reconstruct(freeze_and_refit(w, perturbed)))
    assert after <= before + 1e-12


def test_refit_exactly_representable_tensor():
    rng = np.random.default_rng(2)
    f = decompose_tucker2(rng.standard_normal((6, 6, 3, 3)), 3, 3)
    w = reconstruct(f)  # exactly representable in that subspace
    # corrupt the core, refit must recover error ~0
    bad = TuckerFactors(first=f.first, core=np.zeros_like(f.core), last=f.last,
                        ranks=f.ranks)
    refit = freeze_and_refit(w, bad)
    assert relative_error(w, reconstruct(refit)) < 1e-10


def test_refit_idempotent():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((6, 6, 3, 3))
    f = decompose_tucker2(w, 3, 3)
    once = freeze_and_refit(w, f)
    twice = freeze_and_refit(w, once)
    np.testing.assert_allclose(once.core, twice.core, atol=1e-12)


def test_refit_handles_nonorthonormal_factors():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((6, 6, 3, 3))
    f = decompose_tucker2(w, 3, 3)
    skew = TuckerFactors(first=f.first * 2.0, core=f.core, last=f.last * 0.5,
                         ranks=f.ranks)
    refit = freeze_and_refit(w, skew)
    # pinv path must land at the same reconstruction as the orthonormal path
    assert relative_error(w, reconstruct(refit)) == pytest.approx(
        relative_error(w, reconstruct(freeze_and_refit(w, f))), abs=1e-10
    )


def test_refit_rejects_unknown_factor_names():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 4, 3, 3))
    f = decompose_tucker2(w, 2, 2)
    with pytest.raises(ValueError):
        freeze_and_refit(w, f, frozen=frozenset({"core"}))


def test_refit_svd():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((8, 6))
    f = decompose_svd(w, 3)
    bad = type(f)(w0=f.w0, w1=np.zeros_like(f.w1), rank=f.rank)
    refit = freeze_and_refit_svd(w, bad)
    assert relative_error(w, reconstruct(refit)) <= \
        relative_error(w, reconstruct(f)) + 1e-12
    np.testing.assert_array_equal(refit.w0, f.w0)


# --- branching ---------------------------------------------------------------

def block_diag_factors(rng, c, s, r1, r2, n, k=3):
    f = decompose_tucker2(rng.standard_normal((c, s, k, k)), r1, r2)
    projected, _ = project_core_block_diagonal(f, n)
    return projected


def test_quantize_ranks():
    assert quantize_ranks(309, 309, 4) == (312, 312)
    assert quantize_ranks(8, 8, 4) == (8, 8)
    assert quantize_ranks(1, 5, 2) == (2, 6)


def test_project_core_block_diagonal_reports_dropped_norm():
    rng = np.random.default_rng(7)
    f = decompose_tucker2(rng.standard_normal((8, 8, 3, 3)), 4, 4)
    projected, dropped = project_core_block_diagonal(f, 2)
    assert dropped > 0
    expected = np.sqrt(np.linalg.norm(f.core) ** 2
                       - np.linalg.norm(projected.core) ** 2)
    assert dropped == pytest.approx(expected, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.sampled_from([1, 2, 3, 6]))
def test_branch_sum_identity_block_diagonal(seed, n):
    rng = np.random.default_rng(seed)
    f = block_diag_factors(rng, 8, 10, 6, 6, n)
    branched = branch_tucker(f, n)
    assert len(branched.branches) == n
    np.testing.assert_allclose(
        reconstruct_branched(branched), reconstruct(f), atol=1e-12
    )


def test_branch_rejects_nondividing_n():
    rng = np.random.default_rng(8)
    f = decompose_tucker2(rng.standard_normal((8, 8, 3, 3)), 5, 5)
    with pytest.raises(ValueError):
        branch_tucker(f, 2)
    with pytest.raises(ValueError):
        branch_tucker(f, 0)


def test_grouped_core_param_accounting():
    # N branches: core params = r1 * r2 * k^2 / N
    rng = np.random.default_rng(9)
    r1 = r2 = 308
    n = 4
    f = block_diag_factors(rng, 312, 312, r1, r2, n)
    g = branched_to_grouped(branch_tucker(f, n))
    assert g.core_param_count() == r1 * r2 * 9 // n == 213444


def test_grouped_forward_equals_branch_sum_and_vanilla():
    rng = np.random.default_rng(10)
    n = 2
    f = block_diag_factors(rng, 8, 8, 6, 6, n)
    branched = branch_tucker(f, n)
    g = branched_to_grouped(branched)
    x = rng.standard_normal((2, 8, 6, 6))
    vanilla_out = run_stack(tucker_stack(f, padding=1), x)
    grouped_out = run_stack(grouped_stack(g, padding=1), x)
    branch_out = sum(
        run_stack(tucker_stack(b, padding=1), x) for b in branched.branches
    )
    np.testing.assert_allclose(grouped_out, branch_out, atol=1e-6)
    np.testing.assert_allclose(grouped_out, vanilla_out, atol=1e-6)


def test_single_branch_is_identity_transform():
    rng = np.random.default_rng(11)
    f = decompose_tucker2(rng.standard_normal((6, 6, 3, 3)), 4, 4)
    branched = branch_tucker(f, 1)
    np.testing.assert_allclose(reconstruct_branched(branched), reconstruct(f),
                               atol=1e-12)
