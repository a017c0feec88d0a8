"""Low-rank decomposition of conv / FC layers: planning, factorization,
acceleration transforms, and numerical verification."""

from .decompose import (
    DecomposedLayer,
    SvdFactors,
    TuckerFactors,
    decompose_svd,
    decompose_tucker2,
    reconstruct,
    relative_error,
)
from .planner import (
    CompressionPlan,
    LayerSpec,
    ProfileRecord,
    RankError,
    layer_flops,
    layer_params,
    optimize_rank,
    plan_model,
    svd_rank_for_ratio,
    tucker_ranks_for_ratio,
)
from .transforms import (
    BranchedTucker,
    GroupedConvStack,
    branch_tucker,
    branched_to_grouped,
    freeze_and_refit,
    freeze_and_refit_svd,
    merge_1x1,
    merge_plan,
    quantize_ranks,
)

__all__ = [
    "BranchedTucker",
    "CompressionPlan",
    "DecomposedLayer",
    "GroupedConvStack",
    "LayerSpec",
    "ProfileRecord",
    "RankError",
    "SvdFactors",
    "TuckerFactors",
    "branch_tucker",
    "branched_to_grouped",
    "decompose_svd",
    "decompose_tucker2",
    "freeze_and_refit",
    "freeze_and_refit_svd",
    "layer_flops",
    "layer_params",
    "merge_1x1",
    "merge_plan",
    "optimize_rank",
    "plan_model",
    "quantize_ranks",
    "reconstruct",
    "relative_error",
    "svd_rank_for_ratio",
    "tucker_ranks_for_ratio",
]
