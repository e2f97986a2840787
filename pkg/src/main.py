"""
servosim command line.

    python -m src.main run --scenario paper_fig3 --seed 1 --out out/paper_fig3
    python -m src.main run --no-avoidance --out out/ablation
    python -m src.main replay out/paper_fig3/frames.bin --out out/paper_fig3
    python -m src.main validate --scenario my_arena.toml
    python -m src.main export out/paper_fig3/report.json --out out/paper_fig3-copy
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional

from src.config import LOG_LEVEL
from src.link import LinkError
from src.perception_worker import replay_log
from src.report import export_report, load_report, write_decisions
from src.runner import perception_params, run_mission
from src.schemas import RunConfig, RunConfigError, load_run_config
from src.world import ScenarioError, bundled_scenarios, load_scenario_file, validate_spacing

logger = logging.getLogger(__name__)

USAGE_ERROR = 1


class FrameLog:
    """Appends length-prefixed frames to frames.bin while a run is in progress."""

    def __init__(self, path: Path):
        self.path = path
        self.file = open(path, "wb")
        self.count = 0

    def __call__(self, data: bytes):
        self.file.write(data)
        self.count += 1

    def close(self):
        self.file.close()


def _run_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "scenario", None):
        overrides["scenario"] = args.scenario
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "duration", None) is not None:
        overrides["duration"] = args.duration
    if getattr(args, "no_avoidance", False):
        overrides["avoidance"] = False
    if getattr(args, "two_process", False):
        overrides["two_process"] = True
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if not overrides:
        return config
    # re-validate so overridden values go through the field constraints
    return RunConfig.model_validate({**config.model_dump(by_alias=True), **overrides})


def cmd_run(args) -> int:
    config = _run_config(args)
    scene = load_scenario_file(config.scenario)

    frame_log: Optional[FrameLog] = None
    out = Path(config.out_dir) if config.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config.record_frames and config.avoidance:
            frame_log = FrameLog(out / "frames.bin")
    try:
        report = asyncio.run(run_mission(config, scene=scene, frame_sink=frame_log))
    finally:
        if frame_log is not None:
            frame_log.close()
            logger.info("[Runner] Recorded %d frames to %s", frame_log.count, frame_log.path)

    if out is not None:
        export_report(report, out)
    print(f"{report.outcome.value}: gates_passed={report.gates_passed} tags_tracked={report.tags_tracked} "
          f"avoid_maneuvers={report.avoid_maneuvers} duration={report.duration:.2f}s")
    return report.exit_code


def cmd_replay(args) -> int:
    config = load_run_config(args.config) if args.config else RunConfig()
    params = perception_params(config)
    data = Path(args.log).read_bytes()
    decisions = replay_log(data, params)
    rows = [(frame.timestamp_us / 1e6, msg.seq, msg.direction.value, msg.white_fraction)
            for frame, msg in decisions]
    out = Path(args.out) if args.out else Path(args.log).parent
    out.mkdir(parents=True, exist_ok=True)
    path = write_decisions(rows, out / "decisions.csv")
    print(f"{len(rows)} decisions written to {path}")
    return 0


def cmd_validate(args) -> int:
    scene = load_scenario_file(args.scenario)
    warnings = validate_spacing(scene)
    for warning in warnings:
        print(f"warning: {warning}")
    print(f"{args.scenario}: {len(scene.tags)} tags, {len(scene.gates)} gates, {len(scene.obstacles)} obstacles, "
          f"{len(warnings)} spacing warnings")
    return 0


def cmd_export(args) -> int:
    report = load_report(args.report)
    written = export_report(report, args.out, with_json=False)
    print(f"exported {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="servosim", description="Quadrotor IBVS and pseudo-depth avoidance simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one mission")
    run.add_argument("--scenario", help=f"scenario file or bundled name ({', '.join(bundled_scenarios())})")
    run.add_argument("--config", help="run config TOML")
    run.add_argument("--seed", type=int)
    run.add_argument("--duration", type=float, help="time limit in simulated seconds")
    run.add_argument("--no-avoidance", action="store_true", help="IBVS only, no perception process")
    run.add_argument("--two-process", action="store_true", help="run perception as a separate process")
    run.add_argument("--out", help="output directory for CSVs, summary and report")
    run.set_defaults(func=cmd_run)

    replay = sub.add_parser("replay", help="re-decide avoidance commands from a recorded frame log")
    replay.add_argument("log", help="frames.bin written by a run")
    replay.add_argument("--config", help="run config TOML (decision parameters)")
    replay.add_argument("--out", help="directory for decisions.csv (default: next to the log)")
    replay.set_defaults(func=cmd_replay)

    validate = sub.add_parser("validate", help="check a scenario")
    validate.add_argument("--scenario", default="paper_fig3")
    validate.set_defaults(func=cmd_validate)

    export = sub.add_parser("export", help="write CSVs and summary from a saved report.json")
    export.add_argument("report")
    export.add_argument("--out", required=True)
    export.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (RunConfigError, ScenarioError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (LinkError, OSError) as e:
        logger.error("[Runner] %s", e)
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
