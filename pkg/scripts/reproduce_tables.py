"""Reproduce the reference ResNet statistics and compression tables.

Run from the repo root:  python3 scripts/reproduce_tables.py
"""

import sys
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lrd import layer_flops, layer_params, merge_plan, plan_model
from lrd.models import FIXTURE_NAMES, load_fixture


def pct(after, before):
    q = Decimal(100 * (after - before)) / Decimal(before)
    return float(q.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def main():
    nets = [load_fixture(n) for n in FIXTURE_NAMES]

    print("== model statistics (224x224 input) ==")
    print(f"{'model':<10} {'layers':>6} {'params (M)':>11} {'FLOPs (B)':>10}")
    for name, layers in nets:
        p = sum(layer_params(s) for s in layers)
        f = sum(layer_flops(s) for s in layers)
        n = sum(1 for s in layers if s.counted)
        print(f"{name:<10} {n:>6} {p / 1e6:>11.2f} {f / 1e9:>10.2f}")

    print("\n== per-layer compression, alpha = 2 ==")
    print(f"{'model':<10} {'layers':>6} {'dParams %':>10} {'dFLOPs %':>9}")
    for name, layers in nets:
        plan = plan_model(layers, 2.0, model_name=name)
        t = plan.totals
        print(f"{name:<10} {t['layer_count_after']:>6} "
              f"{pct(t['params_after'], t['params_before']):>10.2f} "
              f"{pct(t['flops_after'], t['flops_before']):>9.2f}")

    print("\n== merged bottlenecks, alpha = 2 ==")
    print(f"{'model':<10} {'layers':>6} {'dParams %':>10} {'dFLOPs %':>9}")
    for name, layers in nets:
        plan = merge_plan(plan_model(layers, 2.0, policy="core-only",
                                     model_name=name))
        t = plan.totals
        print(f"{name:<10} {t['layer_count_after']:>6} "
              f"{pct(t['params_after'], t['params_before']):>10.2f} "
              f"{pct(t['flops_after'], t['flops_before']):>9.2f}")


if __name__ == "__main__":
    main()
