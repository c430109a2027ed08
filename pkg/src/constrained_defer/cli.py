"""Command-line entry point ``cdefer``.

Exit codes: 0 success, 1 failed checks, 2 bad input or config, 3 infeasible
constraints.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from . import __version__
from .pipeline import (
    RunConfig, StudyConfig, fit_and_emit, load_config, resolve_output, run_evaluate,
    run_generalization_study, run_solve, run_sweep, summarize_study, write_scenario,
)
from .scores import MissingScoreError
from .simulate import ScenarioConfig
from .solver import DeferralPolicy, NotFeasible

EXIT_OK, EXIT_CHECKS, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


def _run_config(args) -> RunConfig:
    d = load_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
        if d.get("scenario") is not None:
            d["scenario"] = {**d["scenario"], "seed": args.seed}
    if getattr(args, "out", None):
        d["output_dir"] = args.out
    return RunConfig.from_dict(d)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_simulate(args) -> int:
    d = load_config(args.config) if args.config else {}
    d = d.get("scenario", d)
    if args.seed is not None:
        d["seed"] = args.seed
    for key in ("n_train", "n_val", "n_test"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    cfg = ScenarioConfig.from_dict(d)
    paths = write_scenario(cfg, args.out)
    print(f"wrote {paths['data']} and {paths['scores']}")
    return EXIT_OK


def cmd_fit_scores(args) -> int:
    res = fit_and_emit(args.data, args.out, basis=args.basis, seed=args.seed or 0)
    stalled = res["metadata"].get("not_converged", [])
    print(f"wrote {res['scores']}" + (f" (not converged: {', '.join(stalled)})" if stalled else ""))
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _run_config(args)
    res = run_solve(cfg)
    rep = res["report"]
    pr = res["policy"].predictor
    print(f"k = {list(pr.k)}  p = {pr.p:.6g}  mode = {res['policy'].mode}")
    print(f"tuning objective {rep.objective:.6f}  accuracy {rep.accuracy:.4f}  "
          f"deferral {rep.deferral_rate:.4f}")
    for name, v in rep.constraint_values.items():
        plug = rep.extra.get(f"plugin:{name}")
        plug = "" if plug is None else f"  (plug-in {plug:+.6f})"
        print(f"  {name}: {v:+.6f}  violation {rep.violations[name]:.6f}{plug}")
    print(f"artifacts in {res['out_dir']}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    policy = DeferralPolicy.load(args.policy)
    rep = run_evaluate(cfg, policy, args.split, out_dir=cfg.output_dir)
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    df = run_sweep(cfg, _floats(args.deltas), out_dir=cfg.output_dir)
    cols = ["delta", "status", "tuning_objective", "test_accuracy", "test_max_violation"]
    print(df[cols].to_string(index=False))
    return EXIT_OK


def cmd_gen_study(args) -> int:
    d = load_config(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.seeds is not None:
        d["seeds"] = args.seeds
    if args.n_grid:
        d["n_grid"] = tuple(int(float(x)) for x in args.n_grid.split(","))
    if args.delta is not None:
        d["delta"] = args.delta
    study = StudyConfig(**d)
    df = run_generalization_study(study, out_dir=args.out)
    print(summarize_study(df).to_string(index=False))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    from .checks import run_all
    results = run_all(seed=args.seed or 0, quick=args.quick)
    failed = skipped = 0
    for r in results:
        counted = not (r.informational and args.structural_only)
        mark = "PASS" if r.passed else ("FAIL" if counted else "MISMATCH")
        print(f"{mark:<8} {r.name:<34} {r.detail}")
        failed += (not r.passed) and counted
        skipped += (not r.passed) and not counted
    passed = len(results) - failed - skipped
    print(f"{passed}/{len(results)} checks passed" +
          (f", {skipped} stated-table mismatches not counted" if skipped else ""))
    if args.out:
        out = resolve_output(args.out)
        rows = [{k: v for k, v in asdict(r).items() if k != "data"} for r in results]
        (out / "oracle_check.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_CHECKS if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdefer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--config", help="JSON/YAML scenario (top level or under 'scenario')")
    p.add_argument("--out", required=True, help="output directory")
    for key in ("n_train", "n_val", "n_test"):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-scores", parents=[common], help="fit score models, write score CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="score CSV path")
    p.add_argument("--basis", default="poly", choices=("linear", "poly", "onehot"))
    p.set_defaults(func=cmd_fit_scores)

    p = sub.add_parser("solve", parents=[common], help="tune a policy on the tuning split")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides config)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a saved policy")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--split", default=None, choices=("train", "val", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="tolerance sweep to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--deltas", required=True, help="comma-separated tolerances")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-study", parents=[common], help="sample-size trend of held-out violation")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int)
    p.add_argument("--n-grid", dest="n_grid", help="comma-separated sizes, e.g. 1e3,1e4,1e5")
    p.add_argument("--delta", type=float)
    p.add_argument("--out", default="gen_study")
    p.set_defaults(func=cmd_gen_study)

    p = sub.add_parser("oracle-check", parents=[common], help="verify solver against exact oracles")
    p.add_argument("--quick", action="store_true", help="fewer random instances")
    p.add_argument("--structural-only", action="store_true",
                   help="do not count mismatches against stated loss tables")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NotFeasible as exc:
        print(f"not feasible: {exc}", file=sys.stderr)
        if exc.min_achievable is not None:
            print(f"minimum achievable constraint value: {exc.min_achievable:.6g}", file=sys.stderr)
        if exc.report:
            print(f"closest values: {exc.report}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (MissingScoreError, ValueError, FileNotFoundError, TypeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
