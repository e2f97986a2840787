import json

import pytest

from src.mission import FailureReason
from src.percept import Direction
from src.report import (
    COMMANDS_HEADER,
    TRAJECTORY_HEADER,
    VELOCITY_HEADER,
    YAWRATE_HEADER,
    export_report,
    load_report,
    render_summary,
    render_tables,
    write_decisions,
)
from src.schemas import CommandLogEntry, MissionReport, Outcome
from src.utils import compute_content_hash, fmt6


def _report(seconds=10.0, outcome=Outcome.DONE, **extra) -> MissionReport:
    n = int(round(seconds * 100)) + 1
    ts = [i / 100 for i in range(n)]
    return MissionReport(
        outcome=outcome,
        duration=seconds,
        gates_passed=1,
        tags_tracked=2,
        trajectory=[(t, 0.1 * t, 0.0, 1.0) for t in ts],
        velocity=[(t, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0) for t in ts],
        yawrate=[(t, 0.0, 0.0) for t in ts],
        commands=[
            CommandLogEntry(t=2.25, seq=9, direction=Direction.LEFT, white_fraction=0.12),
            CommandLogEntry(t=2.5, seq=10, direction=Direction.CENTER, white_fraction=0.0),
        ],
        **extra,
    )


def _rows(text):
    return text.strip().split("\n")


def test_tables_have_headers_and_one_row_per_sample():
    tables = render_tables(_report())
    assert _rows(tables["trajectory.csv"])[0] == ",".join(TRAJECTORY_HEADER)
    assert _rows(tables["velocity.csv"])[0] == ",".join(VELOCITY_HEADER)
    assert _rows(tables["yawrate.csv"])[0] == ",".join(YAWRATE_HEADER)
    assert _rows(tables["commands.csv"])[0] == ",".join(COMMANDS_HEADER)
    for name in ("trajectory.csv", "velocity.csv", "yawrate.csv"):
        assert len(_rows(tables[name])) == 1 + 1001
    assert _rows(tables["commands.csv"])[1:] == ["2.25,9,LEFT,0.12", "2.5,10,CENTER,0"]


def test_numbers_use_six_significant_digits():
    assert fmt6(1 / 3) == "0.333333"
    assert fmt6(1234567.0) == "1.23457e+06"
    row = _rows(render_tables(_report())["trajectory.csv"])[-1]
    assert row == "10,1,0,1"


def test_summary_lines_and_digest():
    report = _report(min_obstacle_clearance=0.4123456)
    tables = render_tables(report)
    summary = render_summary(report, tables)
    fields = dict(line.split(": ", 1) for line in _rows(summary))
    assert fields["outcome"] == "Done"
    assert fields["failure_reason"] == "none"
    assert fields["gates_passed"] == "1"
    assert fields["avoid_commands"] == "2"
    assert fields["min_obstacle_clearance"] == "0.412346"
    assert fields["samples"] == "1001"
    expected = compute_content_hash(tables[name].encode("utf-8") for name in sorted(tables))
    assert fields["sha256"] == expected


def test_summary_of_failed_run():
    report = _report(outcome=Outcome.FAILED, failure_reason=FailureReason.TARGET_LOST)
    fields = dict(line.split(": ", 1) for line in _rows(render_summary(report, render_tables(report))))
    assert fields["outcome"] == "Failed"
    assert fields["failure_reason"] == FailureReason.TARGET_LOST.value
    assert fields["min_obstacle_clearance"] == "n/a"
    assert report.exit_code == 2


def test_digest_changes_with_content():
    a, b = _report(), _report(seconds=9.0)
    assert (render_summary(a, render_tables(a)).splitlines()[-1]
            != render_summary(b, render_tables(b)).splitlines()[-1])


def test_export_writes_every_file(tmp_path):
    written = export_report(_report(), tmp_path / "out")
    assert set(written) == {
        "trajectory.csv", "velocity.csv", "yawrate.csv", "commands.csv", "summary.txt", "report.json",
    }
    for path in written.values():
        assert path.exists()
    assert json.loads(written["report.json"].read_text())["outcome"] == "Done"


def test_export_replaces_atomically(tmp_path):
    export_report(_report(), tmp_path)
    first = (tmp_path / "summary.txt").read_text()
    export_report(_report(seconds=5.0), tmp_path, with_json=False)
    assert (tmp_path / "summary.txt").read_text() != first
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_reexport_from_json_is_identical(tmp_path):
    export_report(_report(min_obstacle_clearance=0.3), tmp_path / "a")
    report = load_report(tmp_path / "a" / "report.json")
    export_report(report, tmp_path / "b", with_json=False)
    for name in ("trajectory.csv", "velocity.csv", "yawrate.csv", "commands.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_report_rejects_garbage(tmp_path):
    path = tmp_path / "report.json"
    path.write_text("{\"outcome\": \"Maybe\"}")
    with pytest.raises(ValueError):
        load_report(path)


def test_write_decisions(tmp_path):
    path = write_decisions([(0.0, 0, "CENTER", 0.0), (0.25, 1, "RIGHT", 0.2)], tmp_path / "decisions.csv")
    assert _rows(path.read_text()) == ["t,seq,direction,white_fraction", "0,0,CENTER,0", "0.25,1,RIGHT,0.2"]
