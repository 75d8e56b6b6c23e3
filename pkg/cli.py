"""
Twin-image EPR toolkit - command-line entry point
simulate | analyze | epr | report | sweep
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from constants import EXIT_FAILURE, OVERLAP_CYCLIC, OVERLAP_MODES, PLANE_NAMES, TOOL_VERSION
from errors import TwinEprError
from handlers.analyze_stage import cmd_analyze
from handlers.epr_stage import cmd_epr
from handlers.report_stage import cmd_report
from handlers.simulate_stage import cmd_simulate
from handlers.sweep_stage import DEFAULT_SWEEP_SIZES, cmd_sweep

logger = logging.getLogger(__name__)


def setup_logging() -> None:
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, os.getenv("TWIN_EPR_LOG_LEVEL", "INFO").upper(), logging.INFO),
    )


def default_jobs() -> int:
    raw = os.getenv("TWIN_EPR_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("Ignoring TWIN_EPR_JOBS=%r (not an integer)", raw)
        return 1


def _sizes(raw: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twin-epr", description="Single-pair twin-image EPR simulation and analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {TOOL_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument("--jobs", type=int, default=None, help="worker processes (default: TWIN_EPR_JOBS or 1)")

    simulate = subparsers.add_parser("simulate", parents=[jobs], help="generate twin-image ensembles")
    simulate.add_argument("--config", help=".cfg file (default: reference preset)")
    simulate.add_argument("--out", required=True, help="run directory to write")
    simulate.add_argument("--seed", type=int, help="override the config seed")
    simulate.add_argument("--frames", type=int, help="override the config frame count K")
    simulate.add_argument("--plane", choices=PLANE_NAMES, help="simulate one plane only")

    analyze = subparsers.add_parser("analyze", parents=[jobs], help="per-frame correlation analysis")
    analyze.add_argument("run_dir")
    analyze.add_argument("--plane", choices=PLANE_NAMES, help="analyze one plane only")
    analyze.add_argument("--export-maps", action="store_true", help="write every twin correlation map")
    analyze.add_argument("--overlap", choices=OVERLAP_MODES, default=OVERLAP_CYCLIC,
                         help="cyclic (whole-frame) or linear (overlap-region) normalization")

    epr = subparsers.add_parser("epr", help="EPR products across a near-field and a far-field run")
    epr.add_argument("near_dir")
    epr.add_argument("far_dir")
    epr.add_argument("--out", help="directory for the EPR report (default: the far-field run)")

    report = subparsers.add_parser("report", help="summarize an analyzed run")
    report.add_argument("run_dir")
    report.add_argument("--plane", choices=PLANE_NAMES, help="report one plane only")

    sweep = subparsers.add_parser("sweep", parents=[jobs], help="success rate versus coherence-cell count")
    sweep.add_argument("--config", help=".cfg file (default: reference preset)")
    sweep.add_argument("--out", required=True, help="directory for sweep.csv")
    sweep.add_argument("--sizes", type=_sizes, default=list(DEFAULT_SWEEP_SIZES), help="comma-separated frame sizes")
    sweep.add_argument("--plane", choices=PLANE_NAMES, default="far")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--frames", type=int)
    return parser


def run(args: argparse.Namespace) -> int:
    jobs = args.jobs if getattr(args, "jobs", None) is not None else default_jobs()
    planes = [args.plane] if getattr(args, "plane", None) else None
    if args.command == "simulate":
        return cmd_simulate(args.config, args.out, jobs=jobs, seed=args.seed, planes=planes, frame_count=args.frames)
    if args.command == "analyze":
        return cmd_analyze(args.run_dir, jobs=jobs, export_maps=args.export_maps, planes=planes,
                           overlap=args.overlap)
    if args.command == "epr":
        return cmd_epr(args.near_dir, args.far_dir, out_dir=args.out)
    if args.command == "report":
        return cmd_report(args.run_dir, planes=planes)
    return cmd_sweep(args.config, args.out, image_sizes=args.sizes, plane=args.plane, jobs=jobs,
                     seed=args.seed, frame_count=args.frames)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; errors become a JSON line on stderr and a nonzero exit code."""
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except TwinEprError as exc:
        logger.debug("Command failed", exc_info=True)
        print(json.dumps(exc.to_dict(), sort_keys=True, default=str), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logger.exception("Unexpected failure")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "details": {}}, sort_keys=True),
              file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
