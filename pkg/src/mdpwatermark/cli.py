"""Command-line entry points for the experiment harness.

Subcommands: ``simulate``, ``detect``, ``sweep-beta``, ``bounds``,
``policy-eval``, ``trace``.  Every run is driven by a JSON config file
(see the README for the schema) plus a few overrides, and writes CSV
files with a header row into the output directory.  Identical config
and seed reproduce identical bytes.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, serialize
from .bounds import BoundsReport


def _load_config(args) -> dict:
    path = Path(args.config)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise harness.ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise harness.ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise harness.ConfigError("config root must be a JSON object")
    if args.seed is not None:
        cfg.setdefault("run", {})["seed"] = args.seed
    if args.replicates is not None:
        cfg.setdefault("run", {})["replicates"] = args.replicates
    if getattr(args, "exact_window", False):
        cfg.setdefault("detector", {})["W"] = None
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    bundle = harness.build_bundle(cfg)
    outcomes = harness._run_replicates(bundle)
    rows = [[r, repr(float(c))] for r, c in enumerate(outcomes.cost)]
    harness.write_csv(Path(args.out) / "simulate.csv", ("replicate", "cost"), rows)
    mean_cost = outcomes.cost.mean()
    print(f"simulated {bundle.replicates} replicates x {bundle.horizon} steps; "
          f"mean discounted cost {mean_cost:.6g}")
    return 0


def _cmd_detect(args) -> int:
    cfg = _load_config(args)
    metrics, outcomes = harness.run_experiment(cfg)
    out = Path(args.out)
    harness.write_csv(out / "metrics.csv", harness.SWEEP_FIELDS, [metrics.as_list()])
    harness.write_csv(out / "outcomes.csv", harness.OUTCOME_FIELDS, outcomes.rows())
    print(f"alarmed {1.0 - metrics.censored_frac:.1%} of {metrics.replicates} replicates; "
          f"mean delay {metrics.mean_delay:.6g}, MTBFA estimate {metrics.mtbfa_est:.6g}")
    return 0


def _cmd_sweep_beta(args) -> int:
    cfg = _load_config(args)
    result = harness.sweep_beta(cfg)
    out = Path(args.out)
    harness.write_csv(out / "sweep.csv", harness.SWEEP_FIELDS, [r.as_list() for r in result.rows])
    harness.write_csv(out / "sweep_loss.csv", harness.LOSS_FIELDS, result.losses)
    print(f"swept {len(result.rows)} watermark magnitudes; wrote sweep.csv and sweep_loss.csv")
    return 0


def _cmd_bounds(args) -> int:
    cfg = _load_config(args)
    outcome = harness.bounds_report(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not outcome.supported:
        (out / "bounds.txt").write_text(outcome.unsupported_reason + "\n")
        print(outcome.unsupported_reason)
        return 0
    report = outcome.report
    harness.write_csv(out / "bounds.csv", BoundsReport.CSV_FIELDS, [report.csv_row()])
    (out / "bounds.txt").write_text(report.summary() + "\n")
    serialize.save_json(report.to_dict(), out / "bounds.json")
    print(report.summary())
    return 0


def _cmd_policy_eval(args) -> int:
    cfg = _load_config(args)
    from .sensornet import find_optimal_threshold, PowerModelParams

    model = cfg.get("model", {})
    if model.get("kind") != "sensornet":
        raise harness.ConfigError("policy-eval requires model.kind 'sensornet'")
    try:
        params = PowerModelParams(**{k: v for k, v in model.items() if k != "kind"})
    except (TypeError, ValueError) as e:
        raise harness.ConfigError(f"model: {e}") from None
    levels = cfg.get("policy", {}).get("levels", list(range(1, 11)))
    best, table = find_optimal_threshold(params, levels)
    harness.write_csv(Path(args.out) / "policy_eval.csv", ("level", "cost"),
                      [[l, repr(c)] for l, c in table])
    print(f"optimal threshold {best} over levels {list(levels)}")
    return 0


def _cmd_trace(args) -> int:
    cfg = _load_config(args)
    rows = harness.emit_trace(cfg, replicate=args.replicate)
    harness.write_csv(Path(args.out) / "trace.csv", harness.TRACE_FIELDS,
                      [[t, repr(s), a] for t, s, a in rows])
    print(f"wrote trace.csv with {len(rows)} scored steps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdpwatermark",
        description="Watermarked-policy simulation, change detection and bounds for finite MDPs",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": (_cmd_simulate, "simulate replicates and record discounted costs"),
        "detect": (_cmd_detect, "run the full watermark/attack/detector experiment"),
        "sweep-beta": (_cmd_sweep_beta, "sweep the watermark magnitude and tabulate loss vs delay"),
        "bounds": (_cmd_bounds, "compute detection-performance bounds"),
        "policy-eval": (_cmd_policy_eval, "evaluate threshold policies and report the optimum"),
        "trace": (_cmd_trace, "emit the score trace of a single replicate"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--replicates", type=int, default=None, help="override run.replicates")
        p.add_argument("--out", default=".", help="output directory for CSV files")
        p.add_argument("--exact-window", action="store_true",
                       help="retain all change-point candidates (W = infinity)")
        if name == "trace":
            p.add_argument("--replicate", type=int, default=0, help="replicate index to trace")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - boundary of the CLI
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
