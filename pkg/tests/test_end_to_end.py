import asyncio
import csv

import pytest

from src.main import main
from src.mission import FailureReason
from src.report import export_report
from src.runner import run_mission
from src.schemas import Outcome, RunConfig

SEEDS = (1, 2, 3, 4, 5)
ENCOUNTER = 1.0  # m of surface distance that counts as meeting an obstacle
COMMAND_REACH = 2.0  # m from the obstacle surface within which its command is logged

LOOPBACK_TOML = """
scenario = "paper_fig3"

[link]
frame_addr = "127.0.0.1:0"
command_addr = "127.0.0.1:0"
reply_timeout = 10.0
"""


def _run(config, scene=None):
    return asyncio.run(run_mission(config, scene=scene))


@pytest.fixture(scope="module")
def runs():
    """Finished reports keyed by (seed, avoidance, two_process), computed once per module."""
    cache = {}

    def get(seed=1, avoidance=True, two_process=False):
        key = (seed, avoidance, two_process)
        if key not in cache:
            config = RunConfig.model_validate({
                "seed": seed, "avoidance": avoidance, "two_process": two_process,
                "link": {"frame_addr": "127.0.0.1:0", "command_addr": "127.0.0.1:0", "reply_timeout": 10.0},
            })
            cache[key] = _run(config)
        return cache[key]

    return get


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(LOOPBACK_TOML)
    return path


def _csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _position_at(report, t):
    """Trajectory rows are 10 ms apart starting at t = 0."""
    return report.trajectory[int(round(t * 100))][1:]


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_avoidance_completes_the_mission(runs, gate_scene, seed):
    report = runs(seed)
    assert report.outcome == Outcome.DONE
    assert report.gates_passed == 1
    assert report.tags_tracked == 2
    assert report.min_obstacle_clearance > 0
    assert report.avoid_maneuvers >= 1
    turns = [c for c in report.commands if c.direction.value in ("LEFT", "RIGHT")]
    assert turns
    for obstacle in gate_scene.obstacles:
        closest = min(obstacle.surface_distance(row[1:]) for row in report.trajectory)
        if closest > ENCOUNTER:
            continue
        assert any(obstacle.surface_distance(_position_at(report, c.t)) <= COMMAND_REACH for c in turns), \
            f"no LEFT/RIGHT command near obstacle at {obstacle.base_center}"


@pytest.mark.slow
@pytest.mark.parametrize("seed", SEEDS)
def test_without_avoidance_the_mission_fails(runs, seed):
    report = runs(seed, avoidance=False)
    assert report.commands == []
    assert report.outcome in (Outcome.COLLISION, Outcome.FAILED)
    if report.outcome == Outcome.FAILED:
        assert report.failure_reason == FailureReason.TARGET_LOST


@pytest.mark.slow
def test_repeat_runs_are_byte_identical(runs, run_config, tmp_path):
    first = runs(1)
    second = _run(run_config.model_copy(update={"seed": 1}))
    a = export_report(first, tmp_path / "a", with_json=False)
    b = export_report(second, tmp_path / "b", with_json=False)
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes(), name


@pytest.mark.slow
def test_two_process_run_matches_in_process(runs, tmp_path):
    single = export_report(runs(1), tmp_path / "single", with_json=False)
    split = export_report(runs(1, two_process=True), tmp_path / "split", with_json=False)
    assert single["summary.txt"].read_bytes() == split["summary.txt"].read_bytes()


@pytest.mark.slow
def test_lone_tag_without_obstacles_ignores_avoidance(single_tag_scene, run_config):
    config = run_config.model_copy(update={"duration": 60.0})
    on = _run(config, single_tag_scene)
    off = _run(config.model_copy(update={"avoidance": False}), single_tag_scene)
    assert on.commands == [] and on.avoid_maneuvers == 0
    assert on.tags_tracked == 1
    assert on.outcome == off.outcome
    assert on.trajectory == off.trajectory


def test_cli_validate(capsys):
    assert main(["validate"]) == 0
    out = capsys.readouterr().out
    assert "paper_fig3: 2 tags, 1 gates, 2 obstacles, 0 spacing warnings" in out


def test_cli_unknown_scenario_is_a_usage_error(capsys):
    assert main(["validate", "--scenario", "no_such_arena"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_bad_config_is_a_usage_error(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("seed = -4\n")
    assert main(["run", "--config", str(path), "--duration", "0.1"]) == 1


def test_cli_short_run_times_out(config_file, tmp_path):
    out = tmp_path / "short"
    assert main(["run", "--config", str(config_file), "--duration", "2", "--out", str(out)]) == 4
    trajectory = _csv(out / "trajectory.csv")
    assert len(trajectory) == 201
    assert float(trajectory[-1]["t"]) == pytest.approx(2.0)
    assert (out / "frames.bin").stat().st_size > 0
    summary = (out / "summary.txt").read_text()
    assert "outcome: Timeout" in summary


def test_cli_replay_and_export(config_file, tmp_path):
    out = tmp_path / "run"
    main(["run", "--config", str(config_file), "--duration", "3", "--out", str(out)])

    assert main(["replay", str(out / "frames.bin"), "--out", str(tmp_path / "replay")]) == 0
    decisions = _csv(tmp_path / "replay" / "decisions.csv")
    assert [int(row["seq"]) for row in decisions] == list(range(len(decisions)))
    assert len(decisions) == 12

    assert main(["export", str(out / "report.json"), "--out", str(tmp_path / "copy")]) == 0
    for name in ("trajectory.csv", "velocity.csv", "yawrate.csv", "commands.csv", "summary.txt"):
        assert (out / name).read_bytes() == (tmp_path / "copy" / name).read_bytes()


@pytest.mark.slow
def test_cli_full_run_and_replay_agree(config_file, tmp_path):
    out = tmp_path / "paper_fig3"
    assert main(["run", "--config", str(config_file), "--out", str(out)]) == 0
    main(["replay", str(out / "frames.bin")])
    decided = {(row["seq"], row["direction"]) for row in _csv(out / "decisions.csv") if row["direction"] != "CENTER"}
    commanded = {(row["seq"], row["direction"]) for row in _csv(out / "commands.csv")}
    assert decided == commanded
