"""Command line entry point: ``fedmerge <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from fedmerge.config import ConfigError, ExperimentConfig, apply_overrides, load_config
from fedmerge.data import export_federation

log = logging.getLogger("fedmerge")


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if not args.config:
        cfg.validate()
    return apply_overrides(cfg, seed=args.seed, threads=args.threads, out=args.out)


def _limit_blas_threads() -> None:
    # Client-level threads only; BLAS stays single threaded so results do not
    # depend on how many cores the process sees.
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def cmd_run(args: argparse.Namespace) -> int:
    from fedmerge.experiment import run_experiment

    cfg = _load(args)
    summary = run_experiment(cfg)
    acc = summary["test_acc"]
    print(f"{summary['method']}: test acc {acc['mean']:.4f} +/- {acc['std']:.4f} over {len(cfg.seeds)} seed(s)")
    print(f"artifacts in {cfg.output_dir}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from fedmerge.gradcheck import TOLERANCE, failures, run_gradcheck

    worst = run_gradcheck(seed=args.seed or 0)
    for name, err in worst.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:<30} worst rel err {err:.3e}  {status}")
    bad = failures(worst)
    if bad:
        print(f"gradcheck failed: {', '.join(bad)}")
        return 1
    print(f"all formulas within {TOLERANCE:g}")
    return 0


def cmd_weights_export(args: argparse.Namespace) -> int:
    from fedmerge.experiment import export_weights, weights_csv

    try:
        res = export_weights(args.run, args.round, args.seed)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = weights_csv(res["weights"])
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    score = res["score"]
    print(json.dumps({"round": res["round"], "block_score": score}), file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    from fedmerge.experiment import ablation_table, run_ablation

    cfg = _load(args)
    fractions = [float(f) for f in args.fractions.split(",")]
    rows = run_ablation(cfg, fractions)
    table = ablation_table(rows)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({"rows": rows, "table": table}, indent=1, sort_keys=True), encoding="utf-8")
    print(f"{'variant':<16}{'mean acc':>10}{'std':>10}")
    for row in table:
        print(f"{row['variant']:<16}{row['test_acc_mean']:>10.4f}{row['test_acc_std']:>10.4f}")
    return 0


def cmd_descent(args: argparse.Namespace) -> int:
    from fedmerge.experiment import descent_csv, run_descent

    cfg = _load(args)
    seed = cfg.seeds[0]
    report = run_descent(cfg, seed, multiplier=args.multiplier, rounds=args.rounds)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "descent.csv").write_text(descent_csv(report), encoding="utf-8")
    result = {
        "seed": seed,
        "d": report.d,
        "smoothness": report.smoothness,
        "eta": report.eta,
        "rounds": len(report.rounds),
        "violation_fraction": report.violation_fraction,
        "boxed_violation_fraction": report.boxed_violation_fraction,
        "fit_c": report.fit_c,
        "fit_plateau": report.fit_plateau,
    }
    (out / "descent.json").write_text(json.dumps(result, indent=1, sort_keys=True), encoding="utf-8")
    print(json.dumps(result, indent=1, sort_keys=True))
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load(args)
    clients = cfg.build_clients()
    path = export_federation(clients, cfg.output_dir, cfg.federation.seed)
    print(f"wrote {len(clients)} clients and {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--threads", type=int, help="client-parallel threads (results do not depend on it)")
    common.add_argument("--out", help="output directory (overrides config and FEDMERGE_OUTPUT_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedmerge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="train all seeds and write metrics")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the update formulas")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("weights-export", parents=[common], help="export a weight snapshot and its block score")
    p.add_argument("--run", required=True, help="experiment or seed directory")
    p.add_argument("--round", type=int, help="snapshot round (default: last)")
    p.set_defaults(func=cmd_weights_export)

    p = sub.add_parser("ablate-fixed", parents=[common], help="fixed-weight ablation against dynamic weights")
    p.add_argument("--fractions", default="0.2,0.5,1.0", help="comma separated fractions in (0, 1]")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("descent", parents=[common], help="per-round descent inequality check")
    p.add_argument("--multiplier", type=float, help="step size as a multiple of 1/L (default from config)")
    p.add_argument("--rounds", type=int, help="rounds to check (default from config)")
    p.set_defaults(func=cmd_descent)

    p = sub.add_parser("gen-data", parents=[common], help="write the federation as per-client CSV files")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _limit_blas_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
