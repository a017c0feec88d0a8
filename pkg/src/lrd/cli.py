"""Command line interface: ``lrd stats|plan|decompose|verify|optimize-ranks``.

Exit codes: 0 success (possibly with warnings), 1 verification failure,
2 usage / IO error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import models, nn_ref, planner, transforms
from .decompose import (
    SvdFactors,
    TuckerFactors,
    decompose_svd,
    decompose_tucker2,
    reconstruct,
    relative_error,
)
from .planner import CompressionPlan, LayerSpec
from .tensor_core import load_matrix, load_tensor, save_matrix, save_tensor


def _pct(after: int, before: int) -> float:
    if before == 0:
        return 0.0
    q = Decimal(100 * (after - before)) / Decimal(before)
    return float(q.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _default_seed() -> int:
    return int(os.environ.get("LRD_SEED", "12345"))


def _load_model(path: str) -> tuple[str, list[LayerSpec]]:
    if path in models.FIXTURE_NAMES:
        return models.load_fixture(path)
    return models.load_model_file(path)


# --- stats -------------------------------------------------------------------

def cmd_stats(args) -> int:
    name, layers = _load_model(args.model)
    params = sum(planner.layer_params(s) for s in layers)
    flops = sum(planner.layer_flops(s) for s in layers)
    report = {
        "model": name,
        "layers": sum(1 for s in layers if s.counted),
        "params": params,
        "params_m": round(params / 1e6, 2),
        "flops": flops,
        "flops_b": round(flops / 1e9, 2),
    }
    print(json.dumps(report, indent=2))
    return 0


# --- plan --------------------------------------------------------------------

def build_plan(
    layers: list[LayerSpec],
    name: str,
    alpha: float,
    beta: float,
    policy: str,
    transform: str,
    branches: int,
) -> CompressionPlan:
    if transform == "merge":
        plan = planner.plan_model(layers, alpha, beta, policy="core-only",
                                  model_name=name)
        return transforms.merge_plan(plan)
    plan = planner.plan_model(layers, alpha, beta, policy=policy, model_name=name)
    if transform == "branch":
        for e in plan.entries:
            if e.decision["type"] != "tucker":
                continue
            r1, r2 = transforms.quantize_ranks(
                e.decision["r1"], e.decision["r2"], branches
            )
            r1 = min(r1, branches * (e.spec.c_in // branches))
            r2 = min(r2, branches * (e.spec.c_out // branches))
            if r1 < branches or r2 < branches:
                e.warning = f"cannot branch {e.spec.name} into {branches}"
                continue
            e.decision = {"type": "tucker_branched", "r1": r1, "r2": r2,
                          "branches": branches}
            e.params_after = planner.decomposed_params(e.spec, e.decision)
            e.flops_after = planner.decomposed_flops(e.spec, e.decision)
        plan.transform = "branch"
    elif transform == "freeze":
        for e in plan.entries:
            if e.decision["type"] == "svd":
                e.decision = {**e.decision, "type": "svd_frozen",
                              "frozen_mask": [True, False]}
            elif e.decision["type"] == "tucker":
                e.decision = {**e.decision, "type": "tucker_frozen",
                              "frozen_mask": [True, False, True]}
        plan.transform = "freeze"
    return plan


def plan_report(plan: CompressionPlan) -> dict:
    t = plan.totals
    return {
        "model": plan.model,
        "variant": plan.transform,
        "alpha": plan.alpha,
        "layers_before": t["layer_count_before"],
        "layers_after": t["layer_count_after"],
        "delta_params_pct": _pct(t["params_after"], t["params_before"]),
        "delta_flops_pct": _pct(t["flops_after"], t["flops_before"]),
        "warnings": sum(1 for e in plan.entries if e.warning),
    }


def cmd_plan(args) -> int:
    name, layers = _load_model(args.model)
    if args.alpha <= 1:
        print(f"error: alpha must be > 1, got {args.alpha}", file=sys.stderr)
        return 2
    transform, branches = args.transform, 1
    if transform.startswith("branch"):
        parts = transform.split()
        transform = "branch"
        branches = int(parts[1]) if len(parts) > 1 else args.branches
    plan = build_plan(layers, name, args.alpha, args.beta, args.policy,
                      transform, branches)
    if args.out:
        Path(args.out).write_text(plan.to_json() + "\n")
    print(json.dumps(plan_report(plan), indent=2))
    for e in plan.entries:
        if e.warning:
            print(f"warning: {e.spec.name}: {e.warning}", file=sys.stderr)
    return 0


# --- decompose ---------------------------------------------------------------

def _layer_weight(spec: LayerSpec, weights_dir: str | None, seed: int) -> np.ndarray:
    if weights_dir is not None:
        path = Path(weights_dir) / f"{spec.name}.bin"
        try:
            w = load_tensor(path)
        except FileNotFoundError:
            raise IOError(f"missing weight file for layer {spec.name}: {path}")
        except ValueError as exc:
            raise IOError(f"corrupt weight file for layer {spec.name}: {exc}")
        expect = (spec.c_in // spec.groups, spec.c_out, spec.k, spec.k)
        if w.shape != expect:
            raise IOError(
                f"corrupt weight file for layer {spec.name}: shape {w.shape} "
                f"!= {expect}"
            )
        return w
    return models.seed_weights(spec, seed)


def _emit(outdir: Path, stem: str, arr: np.ndarray) -> str:
    fname = f"{stem}.bin"
    if arr.ndim == 2:
        save_matrix(outdir / fname, arr)
    else:
        save_tensor(outdir / fname, arr)
    return fname


def cmd_decompose(args) -> int:
    name, layers = _load_model(args.model)
    plan = CompressionPlan.from_json(Path(args.plan).read_text())
    seed = args.seed if args.seed is not None else _default_seed()
    outdir = Path(args.emit)
    outdir.mkdir(parents=True, exist_ok=True)

    by_name = {e.spec.name: e for e in plan.entries}
    missing = [s.name for s in layers if s.name not in by_name]
    if missing:
        print(f"error: plan does not cover layers: {missing}", file=sys.stderr)
        return 2

    entries = []
    weights = {}
    try:
        for spec in layers:
            weights[spec.name] = _layer_weight(spec, args.weights, seed)
    except IOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    for spec in layers:
        entry = by_name[spec.name]
        decision = entry.decision
        kind = decision["type"]
        w = weights[spec.name]
        safe = spec.name.replace("/", "_")
        files = {"original": _emit(outdir, f"{safe}__original", w)}
        scheme = kind
        ranks = None
        err = None
        try:
            if kind in ("svd", "svd_frozen"):
                mat = w.reshape(spec.c_in, spec.c_out)
                f = decompose_svd(mat, decision["rank"])
                ranks = [decision["rank"]]
                err = relative_error(mat, reconstruct(f))
                files["w0"] = _emit(outdir, f"{safe}__w0", f.w0)
                files["w1"] = _emit(outdir, f"{safe}__w1", f.w1)
            elif kind in ("tucker", "tucker_frozen"):
                f = decompose_tucker2(w, decision["r1"], decision["r2"])
                ranks = [decision["r1"], decision["r2"]]
                err = relative_error(w, reconstruct(f))
                files["first"] = _emit(outdir, f"{safe}__first", f.first)
                files["core"] = _emit(outdir, f"{safe}__core", f.core)
                files["last"] = _emit(outdir, f"{safe}__last", f.last)
            elif kind == "tucker_branched":
                n = decision["branches"]
                f = decompose_tucker2(w, decision["r1"], decision["r2"])
                f, _ = transforms.project_core_block_diagonal(f, n)
                err = relative_error(w, reconstruct(f))
                g = transforms.branched_to_grouped(transforms.branch_tucker(f, n))
                ranks = [decision["r1"], decision["r2"]]
                files["first"] = _emit(outdir, f"{safe}__first", g.first)
                files["core"] = _emit(outdir, f"{safe}__core", g.core)
                files["last"] = _emit(outdir, f"{safe}__last", g.last)
            elif kind == "tucker_core":
                f = decompose_tucker2(w, decision["r1"], decision["r2"])
                ranks = [decision["r1"], decision["r2"]]
                err = relative_error(w, reconstruct(f))
                files["first"] = _emit(outdir, f"{safe}__first", f.first)
                files["core"] = _emit(outdir, f"{safe}__core", f.core)
                files["last"] = _emit(outdir, f"{safe}__last", f.last)
            elif kind in ("merged_first", "merged_last"):
                host_name = decision.get("into") or decision.get("from")
                host = by_name[host_name]
                hf = decompose_tucker2(
                    weights[host_name], host.decision["r1"], host.decision["r2"]
                )
                mat = w.reshape(spec.c_in, spec.c_out)
                if kind == "merged_first":
                    merged = transforms.merge_1x1(mat, hf.first)
                else:
                    merged = transforms.merge_1x1(hf.last, mat)
                ranks = [decision["rank"]]
                files["merged"] = _emit(outdir, f"{safe}__merged", merged)
            elif kind != "passthrough":
                raise ValueError(f"unsupported decision {kind!r}")
        except ValueError as exc:
            print(f"error: layer {spec.name}: {exc}", file=sys.stderr)
            return 2
        entries.append({
            "layer": spec.name,
            "scheme": scheme,
            "ranks": ranks,
            "relative_error": err,
            "files": files,
            "spec": {
                "kind": spec.kind, "c_in": spec.c_in, "c_out": spec.c_out,
                "k": spec.k, "stride": spec.stride, "padding": spec.padding,
                "groups": spec.groups,
                "branches": decision.get("branches"),
            },
            "decision": decision,
        })

    manifest = {
        "model": name,
        "seed": seed,
        "alpha": plan.alpha,
        "transform": plan.transform,
        "entries": entries,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(entries)} layer bundles to {outdir}")
    return 0


# --- verify ------------------------------------------------------------------

def _load_factor(outdir: Path, fname: str) -> np.ndarray:
    t = load_tensor(outdir / fname)
    if t.shape[2:] == (1, 1):
        return t.reshape(t.shape[0], t.shape[1])
    return t


def _entry_reconstruction(outdir: Path, entry: dict) -> np.ndarray | None:
    files = entry["files"]
    scheme = entry["scheme"]
    if scheme in ("svd", "svd_frozen"):
        return _load_factor(outdir, files["w0"]) @ _load_factor(outdir, files["w1"])
    if scheme in ("tucker", "tucker_frozen", "tucker_core"):
        f = TuckerFactors(
            first=_load_factor(outdir, files["first"]),
            core=load_tensor(outdir / files["core"]),
            last=_load_factor(outdir, files["last"]),
            ranks=tuple(entry["ranks"]),
        )
        return reconstruct(f)
    return None


def _verify_reconstruct(outdir: Path, manifest: dict, failures: list) -> None:
    for entry in manifest["entries"]:
        if entry["relative_error"] is None or entry["scheme"] == "tucker_branched":
            continue
        spec = entry["spec"]
        orig = load_tensor(outdir / entry["files"]["original"])
        rec = _entry_reconstruction(outdir, entry)
        if rec is None:
            continue
        if rec.ndim == 2:
            orig = orig.reshape(spec["c_in"], spec["c_out"])
        err = relative_error(orig, rec)
        if abs(err - entry["relative_error"]) > 1e-8:
            failures.append(
                f"{entry['layer']}: reconstruction error {err:.3e} != "
                f"manifest {entry['relative_error']:.3e}"
            )


def _forward_stacks(outdir: Path, entry: dict, rng):
    """(decomposed stack, reference stack, input) for one bundle entry."""
    spec = entry["spec"]
    files = entry["files"]
    hw = 6 if spec["k"] > 1 else 4
    if spec["kind"] == "linear":
        x = rng.standard_normal((2, spec["c_in"]))
        orig = load_tensor(outdir / files["original"]).reshape(
            spec["c_in"], spec["c_out"]
        )
        if entry["scheme"] in ("svd", "svd_frozen"):
            stack = [
                nn_ref.LinearLayer(_load_factor(outdir, files["w0"])),
                nn_ref.LinearLayer(_load_factor(outdir, files["w1"])),
            ]
            return stack, [nn_ref.LinearLayer(orig)], x
        return None
    x = rng.standard_normal((2, spec["c_in"], hw, hw))
    orig = load_tensor(outdir / files["original"])
    ref = [nn_ref.ConvLayer(orig, spec["stride"], spec["padding"], spec["groups"])]
    scheme = entry["scheme"]
    if scheme in ("svd", "svd_frozen"):
        stack = [
            nn_ref.ConvLayer(_load_factor(outdir, files["w0"])[:, :, None, None]),
            nn_ref.ConvLayer(_load_factor(outdir, files["w1"])[:, :, None, None],
                             stride=spec["stride"]),
        ]
        return stack, ref, x
    if scheme in ("tucker", "tucker_frozen", "tucker_core"):
        stack = [
            nn_ref.ConvLayer(_load_factor(outdir, files["first"])[:, :, None, None]),
            nn_ref.ConvLayer(load_tensor(outdir / files["core"]),
                             stride=spec["stride"], padding=spec["padding"]),
            nn_ref.ConvLayer(_load_factor(outdir, files["last"])[:, :, None, None]),
        ]
        return stack, ref, x
    return None


def _verify_forward(outdir: Path, manifest: dict, failures: list) -> None:
    rng = np.random.default_rng(manifest["seed"])
    for entry in manifest["entries"]:
        got = _forward_stacks(outdir, entry, rng)
        if got is None:
            continue
        stack, _, x = got
        rec = _entry_reconstruction(outdir, entry)
        spec = entry["spec"]
        if spec["kind"] == "linear":
            ref_out = nn_ref.linear(x, rec)
        else:
            if rec.ndim == 2:
                rec = rec[:, :, None, None]
            ref_out = nn_ref.conv2d(x, rec, spec["stride"], spec["padding"])
        out = nn_ref.run_stack(stack, x)
        err = relative_error(ref_out, out)
        if err > 1e-6:
            failures.append(f"{entry['layer']}: forward mismatch {err:.3e}")


def _verify_branch(outdir: Path, manifest: dict, failures: list) -> None:
    rng = np.random.default_rng(manifest["seed"])
    checked = 0
    for entry in manifest["entries"]:
        if entry["scheme"] != "tucker_branched":
            continue
        spec = entry["spec"]
        n = spec["branches"]
        files = entry["files"]
        first = _load_factor(outdir, files["first"])
        core = load_tensor(outdir / files["core"])
        last = _load_factor(outdir, files["last"])
        g = transforms.GroupedConvStack(first=first, core=core, last=last, groups=n)
        x = rng.standard_normal((1, spec["c_in"], 6, 6))
        grouped_out = nn_ref.run_stack(
            transforms.grouped_stack(g, spec["stride"], spec["padding"]), x
        )
        # explicit per-branch sum
        r1 = first.shape[1] // n
        r2 = last.shape[0] // n
        branch_sum = None
        for j in range(n):
            fj = first[:, j * r1:(j + 1) * r1]
            cj = core[:, j * r2:(j + 1) * r2]
            lj = last[j * r2:(j + 1) * r2]
            f = TuckerFactors(first=fj, core=cj, last=lj, ranks=(r1, r2))
            out = nn_ref.run_stack(
                transforms.tucker_stack(f, spec["stride"], spec["padding"]), x
            )
            branch_sum = out if branch_sum is None else branch_sum + out
        err = relative_error(branch_sum, grouped_out)
        if err > 1e-6:
            failures.append(f"{entry['layer']}: grouped vs branch-sum {err:.3e}")
        checked += 1
    if not checked:
        failures.append("no branched entries in bundle")


def _verify_merge(outdir: Path, manifest: dict, failures: list) -> None:
    rng = np.random.default_rng(manifest["seed"])
    by_name = {e["layer"]: e for e in manifest["entries"]}
    checked = 0
    for entry in manifest["entries"]:
        if entry["scheme"] != "merged_first":
            continue
        host = by_name[entry["decision"]["into"]]
        spec = entry["spec"]
        hspec = host["spec"]
        merged = _load_factor(outdir, entry["files"]["merged"])
        orig = load_tensor(outdir / entry["files"]["original"]).reshape(
            spec["c_in"], spec["c_out"]
        )
        hfirst = _load_factor(outdir, host["files"]["first"])
        x = rng.standard_normal((1, spec["c_in"], 5, 5))
        seq = nn_ref.run_stack(
            [nn_ref.ConvLayer(orig[:, :, None, None]),
             nn_ref.ConvLayer(hfirst[:, :, None, None])], x
        )
        one = nn_ref.conv2d(x, merged[:, :, None, None])
        err = relative_error(seq, one)
        if err > 1e-8:
            failures.append(f"{entry['layer']}: merged forward mismatch {err:.3e}")
        checked += 1
    if not checked:
        failures.append("no merged entries in bundle")


def cmd_verify(args) -> int:
    outdir = Path(args.bundle)
    manifest_path = outdir / "manifest.json"
    if not manifest_path.exists():
        print(f"error: no manifest at {manifest_path}", file=sys.stderr)
        return 2
    manifest = json.loads(manifest_path.read_text())
    failures: list[str] = []
    try:
        if args.mode == "reconstruct":
            _verify_reconstruct(outdir, manifest, failures)
        elif args.mode == "forward":
            _verify_forward(outdir, manifest, failures)
        elif args.mode == "branch-equiv":
            _verify_branch(outdir, manifest, failures)
        elif args.mode == "merge-equiv":
            _verify_merge(outdir, manifest, failures)
    except FileNotFoundError as exc:
        print(f"error: missing factor file: {exc}", file=sys.stderr)
        return 2
    for line in failures:
        print(f"FAIL {line}")
    if failures:
        print(f"verify {args.mode}: {len(failures)} failure(s)")
        return 1
    print(f"verify {args.mode}: pass")
    return 0


# --- optimize-ranks ----------------------------------------------------------

def cmd_optimize_ranks(args) -> int:
    if args.reps < 3:
        print(f"error: --reps must be >= 3, got {args.reps}", file=sys.stderr)
        return 2
    name, layers = _load_model(args.model)
    if args.cost == "synthetic":
        provider = planner.make_synthetic_provider(
            args.seed if args.seed is not None else _default_seed(),
            reps=args.reps,
        )
    else:
        provider = planner.make_nn_ref_provider(
            input_hw=args.input_hw, reps=args.reps,
            seed=args.seed if args.seed is not None else _default_seed(),
        )
    plan = planner.plan_model(layers, args.alpha, args.beta, model_name=name)
    for e in plan.entries:
        kind = e.decision["type"]
        if kind not in ("svd", "tucker"):
            continue
        r_init = e.decision.get("rank") or e.decision["r1"]
        r_min = max(1, int(args.rmin_frac * r_init))
        try:
            decision, records = planner.optimize_rank(e.spec, r_init, r_min, provider)
        except Exception as exc:
            e.decision = {"type": "passthrough"}
            e.warning = f"profiling failed: {exc}"
            e.params_after = planner.decomposed_params(e.spec, e.decision)
            e.flops_after = planner.decomposed_flops(e.spec, e.decision)
            e.counted_after = 1 if e.spec.counted else 0
            continue
        e.decision = decision
        e.decision["profile"] = [
            {"rank": r.rank, "median": r.median, "mad": r.mad, "reps": r.reps}
            for r in records
        ]
        e.params_after = planner.decomposed_params(e.spec, _strip(decision))
        e.flops_after = planner.decomposed_flops(e.spec, _strip(decision))
        e.counted_after = (
            planner.decomposed_layer_count(_strip(decision)) if e.spec.counted else 0
        )
    plan.transform = "optimized-ranks"
    if args.out:
        Path(args.out).write_text(plan.to_json() + "\n")
    print(json.dumps(plan_report(plan), indent=2))
    return 0


def _strip(decision: dict) -> dict:
    return {k: v for k, v in decision.items() if k in ("type", "rank", "r1", "r2", "branches")}


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrd", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="layer/param/FLOP statistics of a model file")
    s.add_argument("model", help="model file path or fixture name")
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("plan", help="build a compression plan")
    s.add_argument("model")
    s.add_argument("--alpha", type=float, default=2.0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--policy", default="per-layer",
                   choices=["per-layer", "core-only"])
    s.add_argument("--transform", default="none",
                   help="none | merge | branch [N] | freeze")
    s.add_argument("--branches", type=int, default=2)
    s.add_argument("--out", help="write plan JSON here")
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("decompose", help="execute a plan into a factor bundle")
    s.add_argument("model")
    s.add_argument("plan")
    s.add_argument("--weights", help="directory of <layer>.bin weight tensors")
    s.add_argument("--emit", required=True, help="output bundle directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_decompose)

    s = sub.add_parser("verify", help="numerically verify a factor bundle")
    s.add_argument("bundle")
    s.add_argument("--mode", default="reconstruct",
                   choices=["reconstruct", "forward", "branch-equiv", "merge-equiv"])
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("optimize-ranks", help="profile-driven rank search")
    s.add_argument("model")
    s.add_argument("alpha", type=float)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--rmin-frac", type=float, default=0.5)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--input-hw", type=int, default=8)
    s.add_argument("--cost", default="nnref", choices=["nnref", "synthetic"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_optimize_ranks)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except models.ModelFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
