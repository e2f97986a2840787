"""
Report export: the four plot tables, a summary and the full report as JSON.
"""
import logging
from pathlib import Path
from typing import Dict, Iterable, Sequence, Union

from src.schemas import MissionReport
from src.utils import atomic_write, compute_content_hash, fmt6

logger = logging.getLogger(__name__)

TRAJECTORY_HEADER = ("t", "x", "y", "z")
VELOCITY_HEADER = ("t", "vx_ref", "vx", "vy_ref", "vy", "vz_ref", "vz")
YAWRATE_HEADER = ("t", "wz_ref", "wz")
COMMANDS_HEADER = ("t", "seq", "direction", "white_fraction")
DECISIONS_HEADER = ("t", "seq", "direction", "white_fraction")


def _table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt6(c) if isinstance(c, float) else str(c) for c in row))
    return "\n".join(lines) + "\n"


def render_tables(report: MissionReport) -> Dict[str, str]:
    return {
        "trajectory.csv": _table(TRAJECTORY_HEADER, report.trajectory),
        "velocity.csv": _table(VELOCITY_HEADER, report.velocity),
        "yawrate.csv": _table(YAWRATE_HEADER, report.yawrate),
        "commands.csv": _table(COMMANDS_HEADER, (
            (c.t, c.seq, c.direction.value, c.white_fraction) for c in report.commands
        )),
    }


def render_summary(report: MissionReport, tables: Dict[str, str]) -> str:
    clearance = "n/a" if report.min_obstacle_clearance is None else fmt6(report.min_obstacle_clearance)
    lines = [
        f"outcome: {report.outcome.value}",
        f"failure_reason: {report.failure_reason.value if report.failure_reason else 'none'}",
        f"gates_passed: {report.gates_passed}",
        f"tags_tracked: {report.tags_tracked}",
        f"avoid_maneuvers: {report.avoid_maneuvers}",
        f"avoid_commands: {len(report.commands)}",
        f"min_obstacle_clearance: {clearance}",
        f"duration: {fmt6(report.duration)}",
        f"samples: {len(report.trajectory)}",
    ]
    digest = compute_content_hash(tables[name].encode("utf-8") for name in sorted(tables))
    lines.append(f"sha256: {digest}")
    return "\n".join(lines) + "\n"


def export_report(report: MissionReport, directory: Union[str, Path], with_json: bool = True) -> Dict[str, Path]:
    """
    Writes trajectory.csv, velocity.csv, yawrate.csv, commands.csv and
    summary.txt (plus report.json) into `directory`, each file replaced
    atomically. Returns the written paths by file name.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    tables = render_tables(report)
    files = dict(tables)
    files["summary.txt"] = render_summary(report, tables)
    if with_json:
        files["report.json"] = report.model_dump_json()
    written = {}
    for name, content in files.items():
        try:
            written[name] = atomic_write(out / name, content)
        except OSError as e:
            logger.error("[Report] Failed to write %s: %s", out / name, e)
            raise
    logger.info("[Report] Wrote %d files to %s", len(written), out)
    return written


def load_report(path: Union[str, Path]) -> MissionReport:
    return MissionReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def write_decisions(rows: Iterable[Sequence], path: Union[str, Path]) -> Path:
    return atomic_write(path, _table(DECISIONS_HEADER, rows))
