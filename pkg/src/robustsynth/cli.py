"""Command line entry point.

Exit codes: 0 success, 1 partial task failures, 2 configuration or
integrity errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import orchestrator as orch
from .config import load_config
from .errors import (ConfigurationError, IntegrityError, MixtureInfeasible, NotFound, RobustSynthError)
from .store import Store

log = logging.getLogger("robustsynth")


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="run config (YAML)")
    p.add_argument("--store", type=Path, default=None, help="store root (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robustsynth", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="grow trajectory trees for the selected tasks")
    _common(p, config_required=True)
    p.add_argument("--tasks", default=None, help="glob over task file names in the store")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides the config)")

    p = sub.add_parser("eval-robust", help="run the error-depth robustness suite")
    _common(p, config_required=True)
    p.add_argument("--agent", required=True, help="scripted agent name or policy endpoint URL")
    p.add_argument("--runs", type=int, required=True)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("dataset", help="training-data commands")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    b = dsub.add_parser("build", help="distill finished trees into a training file")
    _common(b)
    b.add_argument("--lambda-ref", type=float, default=None, help="reflection share of the mixture")
    b.add_argument("--total", type=int, default=None, help="mixture size (omit to keep every record)")
    b.add_argument("--name", default=None, help="output stem under datasets/")

    p = sub.add_parser("report", help="render the tables of a finished run")
    _common(p)
    p.add_argument("--run", required=True, help="run id (see runs/)")

    p = sub.add_parser("tasks", help="task store helpers")
    tsub = p.add_subparsers(dest="tasks_command", required=True)
    g = tsub.add_parser("init", help="write generated tasks and base snapshots into the store")
    _common(g)
    g.add_argument("--count", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("cases", help="robustness test case helpers")
    csub = p.add_subparsers(dest="cases_command", required=True)
    c = csub.add_parser("build", help="derive test cases from failed trajectories")
    _common(c)
    return ap


def _config(args):
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "store", None) is not None:
        cfg.store = args.store
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def dispatch(args) -> int:
    cfg = _config(args)
    if args.command == "synthesize":
        out = orch.run_synthesis(cfg, args.tasks, args.workers, args.seed)
        t = out.record["totals"]
        print(f"run {out.run_id}: {t['tasks']} tasks ({t['ok']} ran, {t['skipped']} skipped, "
              f"{t['failed']} failed), {t['leaves']} leaves, {t['successes']} successful")
        return out.exit_code
    if args.command == "eval-robust":
        out = orch.run_eval(cfg, args.agent, args.runs, args.workers)
        print(f"run {out.run_id}: {out.record['cases']} cases, {len(out.record['invalid_cases'])} invalid")
        for p in out.record["reports"]:
            if p.endswith(".summary.txt"):
                print((Store(cfg.store).root / p).read_text(encoding="utf-8"), end="")
        return out.exit_code
    if args.command == "dataset":
        out = orch.run_dataset(cfg, args.lambda_ref, args.total, args.name)
        m = out.record["mixture"]
        print(f"run {out.run_id}: wrote {out.record['records']} records to {out.record['output']} "
              f"({m['n_agn']} agnostic, {m['n_ref']} reflection)")
        return out.exit_code
    if args.command == "report":
        for p in orch.emit_report(Store(cfg.store), args.run):
            print(p)
        return orch.EXIT_OK
    if args.command == "tasks":
        ids = orch.init_tasks(cfg, args.count, args.seed)
        print(f"wrote {len(ids)} tasks to {Store(cfg.store).tasks_dir}")
        return orch.EXIT_OK
    if args.command == "cases":
        _print(orch.build_cases(cfg))
        return orch.EXIT_OK
    raise AssertionError(args.command)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (ConfigurationError, IntegrityError, NotFound, MixtureInfeasible) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return orch.EXIT_CONFIG
    except RobustSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return orch.EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
