#!/usr/bin/env python3
"""
gazetrace command line: run sessions, generate synthetic sessions, re-pool
timelines and export attention networks from existing event files.
"""

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.services.analytics_service import (
    DEFAULT_INTERVAL_S,
    DEFAULT_THRESHOLD_S,
    build_network,
    export_network,
    pool_timelines,
    timeline_to_csv,
)
from src.services.io_service import read_events
from src.services.pipeline_service import run_session, validate_inputs
from src.services.synthetic_service import generate_synthetic
from src.utils.config import load_run_config
from src.utils.errors import ConfigError, GazeTraceError

# Load environment variables
load_dotenv()

LOG_LEVEL_ENV = "GAZETRACE_LOG_LEVEL"

# CLI flag -> RunConfig field
RUN_FLAGS = {
    "scene": "scene_path",
    "gallery": "gallery_path",
    "frames": "frames_path",
    "out": "output_dir",
    "overrides": "overrides_path",
    "max_distance_px": "max_distance_px",
    "max_gap_frames": "max_gap_frames",
    "reid_threshold": "reid_threshold",
    "reid_window": "reid_window",
    "reid_strategy": "reid_strategy",
    "min_valid_depth": "min_valid_depth_fraction",
    "interval": "interval_s",
    "threshold": "threshold_s",
    "pooling": "pooling",
    "workers": "workers",
    "fps": "fps",
}


def _add_input_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML or JSON file holding any of the flags below")
    p.add_argument("--scene", type=Path, help="Scene config JSON")
    p.add_argument("--gallery", type=Path, help="Gallery JSON")
    p.add_argument("--frames", type=Path, help="Frame stream (JSON Lines)")
    p.add_argument("--overrides", type=Path, help="Manual identity corrections JSON")


def _add_timeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--interval", type=float, help="Timeline interval length in seconds (default: 5)")
    p.add_argument("--threshold", type=float, help="Minimum seconds for an interval label (default: 2)")
    p.add_argument("--pooling", choices=["dominant", "median"], help="Interval pooling (default: dominant)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazetrace",
        description="3D gaze analytics over per-frame perception records",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python gazetrace.py synth scenarios/classroom.yaml --out data/classroom --seed 7
  python gazetrace.py run --config data/classroom/run.json --workers 4
  python gazetrace.py timeline data/classroom/out/gaze_events.jsonl --interval 10
  python gazetrace.py network data/classroom/out/gaze_events.jsonl --format json
        """
    )
    parser.add_argument("--log-level", default=None, help=f"Logging level (default: ${LOG_LEVEL_ENV} or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a full session and write every artifact")
    _add_input_flags(run)
    run.add_argument("--out", type=Path, help="Output directory")
    run.add_argument("--max-distance-px", type=float, help="Tracking gate in pixels (default: 75)")
    run.add_argument("--max-gap-frames", type=int, help="Frames a tracklet survives unseen (default: 15)")
    run.add_argument("--reid-threshold", type=float, help="Cosine cutoff (default: the gallery's)")
    run.add_argument("--reid-window", type=int, help="Detections considered per tracklet (default: 10)")
    run.add_argument("--reid-strategy", choices=["earliest", "mean"], help="Tracklet embedding choice")
    run.add_argument("--min-valid-depth", type=float, help="Minimum valid depth fraction (default: 0.1)")
    _add_timeline_flags(run)
    run.add_argument("--workers", type=int, help="Encoding worker threads (default: 1)")
    run.add_argument("--fps", type=float, help="Nominal frame rate for the last frame's duration")
    run.add_argument("--no-timings", action="store_true", help="Leave stage timings out of diagnostics.json")

    synth = sub.add_parser("synth", help="Generate a synthetic session from a scenario script")
    synth.add_argument("script", type=Path, help="Scenario script (YAML or JSON)")
    synth.add_argument("--out", type=Path, required=True, help="Output directory")
    synth.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")

    timeline = sub.add_parser("timeline", help="Pool a gaze event file into timelines")
    timeline.add_argument("events", type=Path, help="gaze_events.jsonl with durations")
    timeline.add_argument("--out", type=Path, help="CSV destination (default: stdout)")
    _add_timeline_flags(timeline)

    network = sub.add_parser("network", help="Export the attention network of a gaze event file")
    network.add_argument("events", type=Path, help="gaze_events.jsonl with durations")
    network.add_argument("--format", choices=["dot", "json"], default="dot")
    network.add_argument("--out", type=Path, help="Destination (default: stdout)")

    validate = sub.add_parser("validate", help="Check scene, gallery, frame stream and rasters")
    _add_input_flags(validate)
    return parser


def configure_logging(level: Optional[str]) -> None:
    level = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _run_flags(args: argparse.Namespace) -> Dict:
    flags = {field: getattr(args, flag, None) for flag, field in RUN_FLAGS.items()}
    if getattr(args, "no_timings", False):
        flags["record_timings"] = False
    return flags


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"✅ Wrote {out}")


async def dispatch(args: argparse.Namespace) -> int:
    if args.command == "run":
        config = load_run_config(args.config, **_run_flags(args))
        result = await run_session(config)
        print("\n" + "=" * 60)
        print("📊 SESSION SUMMARY")
        print("=" * 60)
        print(f"📁 Output: {result['output_dir']}")
        print(f"🎞️  Frames: {result['frames']}")
        print(f"👀 Gaze events: {result['events']}")
        print(f"⚠️  Dropped detections: {result['dropped']}")
        return 0

    if args.command == "synth":
        session = generate_synthetic(args.script, args.out, seed=args.seed)
        print(f"✅ Generated {session.frame_count} frames in {session.root}")
        print(f"📄 Run config: {session.run_config_path}")
        return 0

    if args.command == "timeline":
        events = read_events(args.events)
        interval = args.interval if args.interval is not None else DEFAULT_INTERVAL_S
        threshold = args.threshold if args.threshold is not None else DEFAULT_THRESHOLD_S
        if interval <= 0 or not 0 <= threshold <= interval:
            raise ConfigError(f"need 0 <= threshold ({threshold}) <= interval ({interval}) and interval > 0")
        timeline = pool_timelines(events, interval_s=interval, threshold_s=threshold, pooling=args.pooling or "dominant")
        _emit(timeline_to_csv(timeline), args.out)
        return 0

    if args.command == "network":
        events = read_events(args.events)
        _emit(export_network(build_network(events), args.format), args.out)
        return 0

    if args.command == "validate":
        flags = _run_flags(args)
        flags["output_dir"] = Path(".")
        config = load_run_config(args.config, **flags)
        report = validate_inputs(config)
        print(json.dumps(report, indent=2))
        print("✅ Inputs are valid")
        return 0

    raise ValueError(f"unknown command {args.command!r}")


async def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return await dispatch(args)
    except GazeTraceError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n⏹️ Cancelled by user", file=sys.stderr)
        return 130
    except Exception as e:
        print(f"\n❌ Unexpected error: {str(e)}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return 4


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
