"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Iterator, Optional, Sequence, TextIO

import numpy as np
import yaml

from . import data_io
from .bandit_core import (
    BanditError,
    Context,
    LinUCB,
    learn,
    linucb_scores,
    make_strategy,
    sample_action,
    success_ucb,
)
from .environment import (
    EnvError,
    SyntheticSpec,
    best_actions,
    herding_estimate,
    impute_dr_losses,
)
from .scenario import (
    DEFAULT_ACTION_NAMES,
    SCENARIO_SCHEMA,
    ConfigError,
    load_scenario,
    load_structured,
    run_scenario,
)
from .tuning import SWEEPABLE, sweep

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2



class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is our runtime code
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _emit(obj, stream: Optional[TextIO] = None) -> None:
    (stream or sys.stdout).write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- impute ---------------------------------------------------------------------


def cmd_impute(args) -> int:
    examples = data_io.parse_dataset(args.dataset)
    if not examples:
        raise ValidationFailure(f"{args.dataset}: dataset is empty")
    holdout = [c.strip() for c in args.holdout_classes.split(",") if c.strip()]
    present = {ex.class_label for ex in examples}
    absent = [c for c in holdout if c not in present]
    if absent:
        raise ValidationFailure(f"holdout classes not in dataset: {absent}")
    k = args.k or 1 + max(ex.logged_action for ex in examples)
    subset = [ex for ex in examples if ex.class_label in set(holdout)]
    try:
        herding = herding_estimate(subset, k=k)
    except EnvError as exc:
        raise ValidationFailure(f"herding estimate for held-out classes: {exc}") from None
    pool = impute_dr_losses(subset, herding)
    data_io.write_pool(pool, args.out)
    summary = {
        "rows": len(pool),
        "classes": {
            label: {
                "mean_loss": means.tolist(),
                "best_set": sorted(best_actions(means)),
                "rows": sum(1 for ex in subset if ex.class_label == label),
            }
            for label, means in herding.items()
        },
    }
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)
    return EXIT_OK


# -- synth-log ------------------------------------------------------------------


def cmd_synth_log(args) -> int:
    try:
        spec = SyntheticSpec.from_dict(load_structured(Path(args.spec)))
    except (OSError, yaml.YAMLError, json.JSONDecodeError, ValueError) as exc:
        raise ValidationFailure(f"{args.spec}: {exc}") from None
    if args.n_per_cell < 1:
        raise ValidationFailure("--n-per-cell must be >= 1")
    examples = spec.sample_log(args.n_per_cell, np.random.default_rng(args.seed))
    data_io.write_dataset(examples, args.out)
    _emit({"rows": len(examples), "classes": [c.label for c in spec.classes]})
    return EXIT_OK


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_scenario(args.config)
    result = run_scenario(cfg, args.seed_index)
    data_io.write_trace_csv(result.trace, args.trace_out)
    if args.ucb_trace_out:
        data_io.write_ucb_trace_csv(result.trace, args.ucb_trace_out, result.env.k)
    if args.checkpoint_out:
        data_io.save_checkpoint(result.policy, args.checkpoint_out)
    summary = dict(result.summary)
    summary["action_names"] = list(cfg.action_names)
    _emit(summary)
    return EXIT_OK


# -- tune -----------------------------------------------------------------------


def parse_grid(spec: str) -> dict[str, list[float]]:
    """``"epsilon=0,0.1;lambda=1,100"``, a JSON/YAML mapping, or ``@file``."""
    text = spec
    if spec.startswith("@"):
        text = Path(spec[1:]).read_text(encoding="utf-8")
    text = text.strip()
    if text.startswith("{") or "\n" in text:
        raw = yaml.safe_load(text)
        if not isinstance(raw, dict):
            raise ValidationFailure("grid must be a mapping of parameter to values")
    else:
        raw = {}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            if "=" not in part:
                raise ValidationFailure(f"grid entry {part!r} is not NAME=V1,V2,...")
            name, values = part.split("=", 1)
            raw[name.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    grid: dict[str, list] = {}
    for name, values in raw.items():
        if name not in SWEEPABLE:
            raise ValidationFailure(f"cannot sweep {name!r}; choose from {list(SWEEPABLE)}")
        if not isinstance(values, list) or not values:
            raise ValidationFailure(f"grid entry {name!r} needs a non-empty list of values")
        try:
            grid[name] = [int(v) if name == "d" else float(v) for v in values]
        except (TypeError, ValueError):
            raise ValidationFailure(f"grid entry {name!r} has non-numeric values") from None
    if not grid:
        raise ValidationFailure("grid is empty")
    return grid


def cmd_tune(args) -> int:
    cfg = load_scenario(args.config)
    grid = parse_grid(args.grid)
    seeds = args.seeds or cfg.seeds
    report = sweep(cfg, grid, seeds=seeds, parallelism=args.parallelism)
    data_io.write_sweep_csv(report, args.out)
    if seeds < 2:
        sys.stderr.write("warning: ci95 left empty; confidence intervals need at least 2 seeds\n")
    failed = [c for c in report.cells if c.error]
    best = report.best()
    _emit(
        {
            "cells": len(report.cells),
            "failed_cells": len(failed),
            "seeds": seeds,
            "best": None
            if best is None
            else {"params": best.params, "mean": best.mean, "ci95": best.ci95},
        }
    )
    return EXIT_OK if best is not None else EXIT_RUNTIME


# -- interact -------------------------------------------------------------------


def _feature_items(stream: TextIO, out: TextIO, d: int) -> Iterator[tuple[str, Context]]:
    """Yield items from JSON lines; malformed lines are reported and skipped."""
    n = 0
    for line in stream:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            item_id = None
            if isinstance(obj, dict):
                item_id = obj.get("item_id")
                obj = obj["features"]
            if not isinstance(obj, list) or len(obj) != d:
                raise ValueError(f"expected an array of {d} numbers")
            ctx = Context(np.asarray(obj, dtype=np.float64), item_id=item_id)
        except (ValueError, KeyError, TypeError) as exc:
            out.write(f"! ignoring feature line: {exc}\n")
            continue
        n += 1
        yield str(ctx.item_id or f"item-{n}"), ctx


def format_score_table(estimates, widths, names: Sequence[str], chosen: int) -> str:
    ucb = success_ucb(estimates, widths)
    lines = [f"  {'':2}{'arm':>3}  {'strategy':<18}{'estimate':>10}{'width':>10}{'succ_ucb':>10}"]
    for a, name in enumerate(names):
        mark = "->" if a == chosen else ""
        lines.append(f"  {mark:2}{a:>3}  {name:<18}{estimates[a]:>10.4f}{widths[a]:>10.4f}{ucb[a]:>10.4f}")
    return "\n".join(lines)


def cmd_interact(args, stdin: Optional[TextIO] = None, stdout: Optional[TextIO] = None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    policy = data_io.load_checkpoint(args.checkpoint)
    names = tuple(args.action_names.split(",")) if args.action_names else DEFAULT_ACTION_NAMES
    if len(names) != policy.hyper.k:
        raise ValidationFailure(f"{len(names)} action names for {policy.hyper.k} actions")
    epsilon = policy.hyper.epsilon if args.epsilon is None else args.epsilon
    alpha = policy.hyper.alpha if args.alpha is None else args.alpha
    try:
        strategy = make_strategy(args.algorithm, epsilon=epsilon, alpha=alpha)
    except BanditError as exc:
        raise ValidationFailure(str(exc)) from None
    policy.algorithm = args.algorithm
    rng = np.random.default_rng(args.seed)
    width_alpha = alpha if isinstance(strategy, LinUCB) else (args.alpha or 0.0)

    feature_src = stdin if args.features_from == "-" else open(args.features_from, encoding="utf-8")
    try:
        items = _feature_items(feature_src, stdout, policy.hyper.d)
        outcomes = iter(stdin)
        for item_id, ctx in items:
            while True:
                dist = strategy.explore(policy, ctx)
                action = sample_action(dist, rng)
                est, wid = linucb_scores(policy, ctx, width_alpha)
                stdout.write(f"{item_id}: recommend {action} {names[action]}\n")
                stdout.write(format_score_table(est, wid, names, action) + "\n")
                answer = _read_outcome(outcomes, stdout)
                if answer is None:
                    stdout.write("session ended\n")
                    return EXIT_OK
                if answer == "d":
                    stdout.write("discarded; no update\n")
                    continue
                loss = float(answer)
                learn(policy, ctx, action, loss, dist[action])
                try:
                    data_io.save_checkpoint(policy, args.checkpoint)
                except OSError as exc:
                    stdout.write(f"! checkpoint write failed: {exc}\n")
                    return EXIT_RUNTIME
                if loss == 0.0:
                    stdout.write("success; next item\n")
                    break
                stdout.write("failure; retrying the same item\n")
        stdout.write("no more items\n")
        return EXIT_OK
    finally:
        if feature_src is not stdin:
            feature_src.close()


def _read_outcome(lines: Iterator[str], out: TextIO) -> Optional[str]:
    while True:
        out.write("outcome [0 success / 1 failure / d discard]> ")
        out.flush()
        line = next(lines, None)
        if line is None:
            return None
        answer = line.strip().lower()
        if answer in ("0", "1", "d"):
            return answer
        out.write(f"! unrecognized outcome {line.strip()!r}\n")


# -- schema ---------------------------------------------------------------------


def cmd_schema(args) -> int:
    _emit(SCENARIO_SCHEMA)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bitebandit", description="Contextual bandits for bite acquisition strategies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("impute", help="build a doubly-robust pool from a logged dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--holdout-classes", required=True, help="comma-separated class labels")
    s.add_argument("--out", required=True, help="pool file (JSON lines)")
    s.add_argument("--summary", help="also write the summary JSON here")
    s.add_argument("--k", type=int, help="number of actions (default: inferred)")
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("synth-log", help="sample a uniform-logging dataset from a synthetic spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--n-per-cell", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_log)

    s = sub.add_parser("simulate", help="run one scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--trace-out", required=True)
    s.add_argument("--checkpoint-out")
    s.add_argument("--ucb-trace-out", help="trace with per-arm estimate/width columns")
    s.add_argument("--seed-index", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("tune", help="sweep hyper-parameters over seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help='e.g. "epsilon=0,0.05,0.1" or @grid.yaml')
    s.add_argument("--seeds", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--parallelism", type=int, default=1)
    s.set_defaults(func=cmd_tune)

    s = sub.add_parser("interact", help="operator-in-the-loop session")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--algorithm", required=True, choices=["greedy", "epsilon_greedy", "linucb"])
    s.add_argument("--epsilon", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--features-from", default="-", help="JSON-lines feature file, or - for stdin")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--action-names", help="comma-separated display names")
    s.set_defaults(func=cmd_interact)

    s = sub.add_parser("schema", help="print the scenario JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, ValidationFailure, data_io.DataFormatError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INVALID
    except (OSError, ValueError, RuntimeError) as exc:
        sys.stderr.write(f"runtime error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
