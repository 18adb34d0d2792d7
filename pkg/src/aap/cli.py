"""Command-line surface.

Subcommands: ``run`` executes a pruning run from a JSON config, ``report``
renders plot-ready CSVs from a run directory, ``bench`` measures masked vs
compacted forward latency, ``inspect`` prints a checkpoint header, and
``serve`` starts the HTTP service. Exit codes: 2 for invalid configuration,
3 for diverged training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pydantic import ValidationError

from . import checkpoint as ckpt_store
from .config import RunConfig
from .runner import REPORT_KINDS, bench, execute_run, write_report
from .training import DivergedTrainingError


def _load_config(path: str) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: cannot read config {path}: {e}", file=sys.stderr)
        raise SystemExit(2)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        for err in e.errors():
            loc = ".".join(str(p) for p in err["loc"])
            print(f"error: {loc}: {err['msg']}", file=sys.stderr)
        raise SystemExit(2)


def cmd_run(args) -> int:
    config = _load_config(args.config)
    try:
        run_dir = execute_run(config, args.run_dir)
    except DivergedTrainingError as e:
        print(f"error: training diverged at epoch {e.epoch}", file=sys.stderr)
        return 3
    summary = json.loads((run_dir / "summary.json").read_text())
    print(json.dumps({"run_dir": str(run_dir), **summary}, indent=2))
    return 0


def cmd_report(args) -> int:
    try:
        path = write_report(args.run, args.kind)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(path)
    return 0


def cmd_bench(args) -> int:
    ckpt_path = Path(args.checkpoint)
    run_dir = args.run or ckpt_path.parent.parent
    report = bench(ckpt_path, trials=args.trials, run_dir=run_dir)
    print(json.dumps(report, indent=2))
    return 0


def cmd_inspect(args) -> int:
    try:
        header = ckpt_store.read_header(args.checkpoint)
    except (FileNotFoundError, ckpt_store.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(header, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    uvicorn.run("aap.service:app", host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="aap", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="execute a pruning run")
    p.add_argument("--config", required=True, help="path to a JSON run config")
    p.add_argument("--run-dir", default=None, help="explicit run directory")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="emit a plot-ready CSV")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--kind", required=True, choices=REPORT_KINDS)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("bench", help="masked vs compacted latency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--run", default=None, help="run directory (for the architecture)")
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("inspect", help="print a checkpoint header")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
