import math
from dataclasses import replace

import numpy as np
import pytest

from src.features import DesiredFeatures, FeatureVec
from src.mission import (
    AvoidManeuver,
    CommandSource,
    FailureReason,
    GateLeg,
    ManeuverKind,
    MissionParams,
    MissionState,
    Phase,
    crossing_distance,
    search_command,
    step_mission,
)
from src.percept import AvoidCommandMsg, Direction
from src.servo import CommandFrame, VelocityCommand
from src.world import SearchHint, load_scenario

PARAMS = MissionParams()
DES = DesiredFeatures(z_star=1.2, a_star=0.01)
DT = 0.05
SERVO = VelocityCommand(vx=0.1, wz=0.05)

CONVERGED = FeatureVec(xn=0.0, yn=0.0, an=1.25, fyaw=math.pi / 2, xg=0.0)  # error 0.05
FAR = FeatureVec(xn=0.3, yn=0.0, an=2.0, fyaw=1.2, xg=0.2)

TWO_TAGS = """
[world]
cruise_altitude = 1.0

[[tag]]
id = 0
center = [3.0, 0.0, 1.0]
normal = [-1.0, 0.0, 0.0]

[[tag]]
id = 1
center = [6.0, 0.0, 1.0]
normal = [-1.0, 0.0, 0.0]
search_hint = "Left"

[[gate]]
tag_id = 0
center = [3.0, 0.0, 2.0]
width = 1.0
height = 0.8
pass_clearance = 0.5
"""


@pytest.fixture
def scene():
    return load_scenario(TWO_TAGS)


def step(state, scene, obs=None, servo=None, avoid=None, altitude=1.0, params=PARAMS):
    return step_mission(state, obs, servo, avoid, scene, params, DT, altitude=altitude, desired=DES)


def avoid(direction, fraction=0.12, seq=1):
    return AvoidCommandMsg(direction=direction, seq=seq, white_fraction=fraction)


def test_takeoff_climbs_then_tracks(scene):
    state, cmd = step(MissionState(), scene, altitude=0.0)
    assert state.phase == Phase.TAKEOFF
    assert cmd.velocity.vz == pytest.approx(PARAMS.climb_rate)
    state, _ = step(state, scene, obs=FAR, servo=SERVO, altitude=1.0)
    assert state.phase == Phase.TRACK and state.k == 0


def test_takeoff_without_tag_searches(scene):
    state, _ = step(MissionState(), scene, altitude=1.02)
    assert state.phase == Phase.SEARCH and state.k == 0


def test_track_forwards_servo(scene):
    state, cmd = step(MissionState(phase=Phase.TRACK), scene, obs=FAR, servo=SERVO)
    assert cmd.velocity == SERVO
    assert cmd.source == CommandSource.SERVO
    assert state.consec_hits == 0


def test_tenth_converged_frame_starts_gate(scene):
    state = MissionState(phase=Phase.TRACK, k=0, consec_hits=9)
    state, cmd = step(state, scene, obs=CONVERGED, servo=SERVO)
    assert state.phase == Phase.CROSS_GATE and state.leg == GateLeg.UP
    assert state.tags_tracked == 1
    assert cmd.source == CommandSource.GATE


def test_ninth_converged_frame_keeps_tracking(scene):
    state = MissionState(phase=Phase.TRACK, consec_hits=8)
    state, _ = step(state, scene, obs=CONVERGED, servo=SERVO)
    assert state.phase == Phase.TRACK and state.consec_hits == 9


def test_large_error_resets_hold_count(scene):
    state = MissionState(phase=Phase.TRACK, consec_hits=7)
    state, _ = step(state, scene, obs=FAR, servo=SERVO)
    assert state.consec_hits == 0


def test_left_obstacle_turns_right(scene):
    state, cmd = step(MissionState(phase=Phase.TRACK), scene, obs=FAR, servo=SERVO, avoid=avoid(Direction.LEFT))
    assert state.phase == Phase.AVOID_LOCKED
    assert state.maneuver.kind == ManeuverKind.RIGHT_TURN_FORWARD
    assert cmd.velocity.wz < 0
    assert state.avoid_maneuvers == 1


def test_right_obstacle_turns_left(scene):
    state, cmd = step(MissionState(phase=Phase.TRACK), scene, obs=FAR, servo=SERVO, avoid=avoid(Direction.RIGHT))
    assert state.maneuver.kind == ManeuverKind.LEFT_TURN_FORWARD
    assert cmd.velocity.wz > 0


def test_small_obstacle_is_ignored(scene):
    state, cmd = step(MissionState(phase=Phase.TRACK), scene, obs=FAR, servo=SERVO,
                      avoid=avoid(Direction.LEFT, fraction=0.04))
    assert state.phase == Phase.TRACK
    assert cmd.source == CommandSource.SERVO


def test_center_follows_policy(scene):
    state, _ = step(MissionState(phase=Phase.TRACK), scene, obs=FAR, servo=SERVO, avoid=avoid(Direction.CENTER))
    assert state.phase == Phase.TRACK
    hold = MissionParams(center_policy="hold")
    state, cmd = step(MissionState(phase=Phase.TRACK), scene, obs=FAR, servo=SERVO,
                      avoid=avoid(Direction.CENTER), params=hold)
    assert state.maneuver.kind == ManeuverKind.HOLD_FORWARD
    assert cmd.velocity.vx == 0.0 and cmd.velocity.wz == 0.0


def test_lock_ignores_new_messages(scene):
    maneuver = AvoidManeuver(ManeuverKind.RIGHT_TURN_FORWARD, 2.5, 0.8, 0.8)
    state = MissionState(phase=Phase.AVOID_LOCKED, maneuver=maneuver, elapsed=1.0)
    new, cmd = step(state, scene, obs=FAR, servo=SERVO, avoid=avoid(Direction.RIGHT, seq=9))
    assert new.elapsed == pytest.approx(1.0 + DT)
    assert replace(new, elapsed=state.elapsed) == state
    assert cmd.source == CommandSource.AVOID


def test_maneuver_turns_then_flies_forward():
    m = AvoidManeuver(ManeuverKind.RIGHT_TURN_FORWARD, 2.5, 0.8, 0.8, turn_fraction=0.4)
    assert m.command_at(0.0).wz == pytest.approx(-0.8)
    assert m.command_at(0.99).vx == 0.0
    assert m.command_at(1.0).vx == pytest.approx(0.8)
    assert m.command_at(1.0).wz == 0.0
    with pytest.raises(ValueError):
        AvoidManeuver(ManeuverKind.HOLD_FORWARD, 0.0, 0.0, 0.0)


def test_unlock_returns_to_track(scene):
    maneuver = AvoidManeuver(ManeuverKind.LEFT_TURN_FORWARD, 2.5, 0.8, 0.8)
    state = MissionState(phase=Phase.AVOID_LOCKED, k=1, maneuver=maneuver, elapsed=2.5)
    state, _ = step(state, scene)
    assert state.phase == Phase.TRACK and state.k == 1 and state.maneuver is None


def test_lost_target_starts_search(scene):
    state = MissionState(phase=Phase.TRACK, k=1)
    steps = 0
    while state.phase == Phase.TRACK:
        state, _ = step(state, scene)
        steps += 1
    assert steps * DT == pytest.approx(PARAMS.t_lost, abs=DT)
    assert state.phase == Phase.SEARCH and state.search_from_lost


def test_gate_crossing_legs(scene):
    state = MissionState(phase=Phase.CROSS_GATE, leg=GateLeg.UP)
    state, cmd = step(state, scene, altitude=1.0)
    assert state.leg == GateLeg.UP and cmd.velocity.vz > 0
    state, cmd = step(state, scene, altitude=1.98)
    assert state.leg == GateLeg.FORWARD

    distance = crossing_distance(scene, 0, DES.z_star)
    assert distance == pytest.approx(1.2 + 0.05 + 0.5)
    steps = 0
    while state.leg == GateLeg.FORWARD:
        state, cmd = step(state, scene, altitude=2.0)
        steps += 1
    # 1.75 m at 0.5 m/s is exactly 70 steps of 50 ms, the last one switching legs
    assert steps == round(distance / (PARAMS.gate_forward_speed * DT))
    assert steps * DT * PARAMS.gate_forward_speed == pytest.approx(distance)

    state, cmd = step(state, scene, altitude=2.0)
    assert state.leg == GateLeg.DOWN and cmd.velocity.vz < 0
    state, _ = step(state, scene, altitude=1.01)
    assert state.phase == Phase.SEARCH and state.k == 1
    assert state.gates_passed == 1


def test_last_target_without_gate_is_done(scene):
    state = MissionState(phase=Phase.TRACK, k=1, consec_hits=9)
    state, _ = step(state, scene, obs=CONVERGED, servo=SERVO)
    assert state.phase == Phase.DONE and state.tags_tracked == 1


def test_first_target_without_gate_moves_on(single_tag_scene, scene):
    gateless = scene.model_copy(update={"gates": []})
    state, _ = step(MissionState(phase=Phase.TRACK, consec_hits=9), gateless, obs=CONVERGED, servo=SERVO)
    assert state.phase == Phase.SEARCH and state.k == 1
    state, _ = step(MissionState(phase=Phase.TRACK, consec_hits=9), single_tag_scene, obs=CONVERGED, servo=SERVO)
    assert state.phase == Phase.DONE


@pytest.mark.parametrize("hint, expected, sweep", [
    (SearchHint.LEFT, (0.0, 0.0, 0.5), False),
    (SearchHint.RIGHT, (0.0, 0.0, -0.5), False),
    (SearchHint.UP, (0.0, 0.3, 0.0), False),
    (SearchHint.DOWN, (0.0, -0.3, 0.0), False),
    (SearchHint.UNKNOWN, (0.0, 0.0, 0.5), True),
])
def test_search_command(hint, expected, sweep):
    cmd, full_sweep = search_command(hint, PARAMS)
    assert (cmd.vx, cmd.vz, cmd.wz) == pytest.approx(expected)
    assert cmd.vy == 0.0
    assert full_sweep is sweep


def test_search_finds_target(scene):
    state = MissionState(phase=Phase.SEARCH, k=1)
    state, cmd = step(state, scene)
    assert cmd.source == CommandSource.SEARCH and cmd.velocity.wz > 0
    state, cmd = step(state, scene, obs=FAR, servo=SERVO)
    assert state.phase == Phase.TRACK and state.k == 1
    assert cmd.velocity == SERVO


@pytest.mark.parametrize("hint", list(SearchHint))
def test_search_terminates_within_budget(hint):
    doc = TWO_TAGS.replace('search_hint = "Left"', f'search_hint = "{hint.value}"')
    scene = load_scenario(doc)
    for from_lost, reason in ((False, FailureReason.SEARCH_TIMEOUT), (True, FailureReason.TARGET_LOST)):
        state = MissionState(phase=Phase.SEARCH, k=1, search_from_lost=from_lost)
        t = 0.0
        while state.phase == Phase.SEARCH:
            state, _ = step(state, scene)
            t += DT
        assert state.phase == Phase.FAILED and state.reason == reason
        assert t <= PARAMS.search_budget + DT
        assert state.search_yaw_accum <= 2 * math.pi + 1e-9


def test_unknown_search_stops_turning_after_full_sweep():
    single = load_scenario(TWO_TAGS.replace('search_hint = "Left"', ""))
    state = MissionState(phase=Phase.SEARCH, k=1)
    turning = 0
    while state.phase == Phase.SEARCH:
        state, cmd = step(state, single)
        turning += cmd.velocity.wz != 0.0
    assert turning * DT * PARAMS.search_yaw_rate == pytest.approx(2 * math.pi, abs=PARAMS.search_yaw_rate * DT)


def test_terminal_states_are_absorbing(scene):
    for terminal in (MissionState(phase=Phase.DONE), MissionState(phase=Phase.FAILED, reason=FailureReason.SEARCH_TIMEOUT)):
        state, cmd = step(terminal, scene, obs=FAR, servo=SERVO, avoid=avoid(Direction.LEFT))
        assert state == terminal and cmd.source == CommandSource.HOLD


def test_cross_gate_ignores_avoidance(scene):
    state = MissionState(phase=Phase.CROSS_GATE, leg=GateLeg.FORWARD)
    new, _ = step(state, scene, altitude=2.0, avoid=avoid(Direction.LEFT))
    assert new.phase == Phase.CROSS_GATE


def test_rejects_bad_inputs(scene):
    with pytest.raises(ValueError):
        step_mission(MissionState(), None, None, None, scene, PARAMS, 0.0, altitude=0.0, desired=DES)
    with pytest.raises(ValueError):
        step(MissionState(phase=Phase.TRACK), scene, obs=FAR, servo=VelocityCommand(frame=CommandFrame.CAMERA))


ALLOWED = {
    Phase.TAKEOFF: {Phase.TAKEOFF, Phase.TRACK, Phase.SEARCH},
    Phase.TRACK: {Phase.TRACK, Phase.CROSS_GATE, Phase.SEARCH, Phase.AVOID_LOCKED, Phase.DONE},
    Phase.CROSS_GATE: {Phase.CROSS_GATE, Phase.SEARCH, Phase.DONE},
    Phase.SEARCH: {Phase.SEARCH, Phase.TRACK, Phase.FAILED},
    Phase.AVOID_LOCKED: {Phase.AVOID_LOCKED, Phase.TRACK},
    Phase.DONE: {Phase.DONE},
    Phase.FAILED: {Phase.FAILED},
}


def _random_inputs(rng):
    obs = [None, CONVERGED, FAR][rng.integers(3)]
    servo = SERVO if obs is not None else None
    msg = None
    if rng.random() < 0.5:
        msg = avoid(Direction(rng.choice([d.value for d in Direction])), round(float(rng.random()), 4),
                    int(rng.integers(0, 2 ** 31)))
    altitude = float(rng.choice([0.0, 1.0, 1.5, 2.0]))
    return obs, servo, msg, altitude


def test_random_traces_follow_the_transition_graph(scene):
    rng = np.random.default_rng(8)
    for _ in range(300):
        state = MissionState()
        k_prev = 0
        for _ in range(200):
            obs, servo, msg, altitude = _random_inputs(rng)
            new, cmd = step(state, scene, obs=obs, servo=servo, avoid=msg, altitude=altitude)
            assert new.phase in ALLOWED[state.phase]
            assert new.k >= k_prev and 0 <= new.k <= scene.n
            assert cmd is not None and cmd.velocity.frame == CommandFrame.BODY
            k_prev = new.k
            state = new


def test_lock_holds_under_fuzzed_messages(scene):
    rng = np.random.default_rng(9)
    kinds = [ManeuverKind.RIGHT_TURN_FORWARD, ManeuverKind.LEFT_TURN_FORWARD, ManeuverKind.HOLD_FORWARD]
    for _ in range(10_000):
        kind = kinds[rng.integers(3)]
        maneuver = AvoidManeuver(kind, PARAMS.avoid_duration, PARAMS.avoid_yaw_rate, PARAMS.avoid_forward_speed)
        state = MissionState(phase=Phase.AVOID_LOCKED, maneuver=maneuver)
        while state.phase == Phase.AVOID_LOCKED:
            obs, servo, msg, altitude = _random_inputs(rng)
            state, cmd = step(state, scene, obs=obs, servo=servo, avoid=msg, altitude=altitude)
            if state.phase == Phase.AVOID_LOCKED:
                assert state.maneuver.kind == kind
                assert cmd.source == CommandSource.AVOID
        assert state.phase == Phase.TRACK
