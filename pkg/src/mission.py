"""
Mission switching law: takeoff, target tracking, gate crossing, target
search and locked avoidance maneuvers, from tag id_0 to the destination tag.

step_mission is a pure transition function. The caller owns the state and
feeds one observation snapshot per control tick.
"""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.features import DesiredFeatures, FeatureVec
from src.percept import AvoidCommandMsg, Direction
from src.servo import HOLD, CommandFrame, VelocityCommand, feature_error
from src.world import SearchHint, WorldScene

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
DIST_EPS = 1e-9  # absorbs drift from summing dt


class Phase(str, Enum):
    TAKEOFF = "Takeoff"
    TRACK = "Track"
    CROSS_GATE = "CrossGate"
    SEARCH = "Search"
    AVOID_LOCKED = "AvoidLocked"
    DONE = "Done"
    FAILED = "Failed"


class GateLeg(str, Enum):
    UP = "Up"
    FORWARD = "Forward"
    DOWN = "Down"


class ManeuverKind(str, Enum):
    RIGHT_TURN_FORWARD = "RightTurnForward"
    LEFT_TURN_FORWARD = "LeftTurnForward"
    HOLD_FORWARD = "HoldForward"


class FailureReason(str, Enum):
    SEARCH_TIMEOUT = "SearchTimeout"
    TARGET_LOST = "TargetLost"


class CommandSource(str, Enum):
    SERVO = "Servo"
    GATE = "Gate"
    SEARCH = "Search"
    AVOID = "Avoid"
    HOLD = "Hold"


class MissionParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    eps_track: float = Field(default=0.10, gt=0)
    n_hold: int = Field(default=10, ge=1)
    t_lost: float = Field(default=1.0, gt=0)
    area_min: float = Field(default=0.05, ge=0, le=1)
    avoid_duration: float = Field(default=2.5, gt=0)
    avoid_yaw_rate: float = Field(default=0.8, gt=0)
    avoid_forward_speed: float = Field(default=0.8, ge=0)
    turn_fraction: float = Field(default=0.4, ge=0, le=1)
    search_yaw_rate: float = Field(default=0.5, gt=0)
    search_vz: float = Field(default=0.3, gt=0)
    search_timeout: float = Field(default=5.0, ge=0)
    vertical_search_span: float = Field(default=1.0, ge=0)
    climb_rate: float = Field(default=0.4, gt=0)
    k_alt: float = Field(default=1.5, gt=0)
    gate_forward_speed: float = Field(default=0.5, gt=0)
    altitude_tolerance: float = Field(default=0.05, gt=0)
    center_policy: str = Field(default="track", pattern="^(track|hold)$")
    center_forward_speed: float = Field(default=0.0, ge=0)

    @property
    def search_budget(self) -> float:
        """Longest time a single search may last."""
        return TWO_PI / self.search_yaw_rate + self.search_timeout


@dataclass(frozen=True)
class AvoidManeuver:
    kind: ManeuverKind
    duration: float
    yaw_rate: float
    forward_speed: float
    turn_fraction: float = 0.4

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"maneuver duration must be positive, got {self.duration}")

    def command_at(self, elapsed: float) -> VelocityCommand:
        if self.kind == ManeuverKind.HOLD_FORWARD:
            return VelocityCommand(vx=self.forward_speed)
        if elapsed < self.turn_fraction * self.duration:
            sign = -1.0 if self.kind == ManeuverKind.RIGHT_TURN_FORWARD else 1.0
            return VelocityCommand(wz=sign * self.yaw_rate)
        return VelocityCommand(vx=self.forward_speed)


@dataclass(frozen=True)
class ManeuverCmd:
    velocity: VelocityCommand
    source: CommandSource


@dataclass(frozen=True)
class MissionState:
    phase: Phase = Phase.TAKEOFF
    k: int = 0
    consec_hits: int = 0
    lost_time: float = 0.0
    search_yaw_accum: float = 0.0
    search_elapsed: float = 0.0
    search_from_lost: bool = False
    leg: Optional[GateLeg] = None
    leg_elapsed: float = 0.0
    maneuver: Optional[AvoidManeuver] = None
    elapsed: float = 0.0
    reason: Optional[FailureReason] = None
    gates_passed: int = 0
    tags_tracked: int = 0
    avoid_maneuvers: int = 0

    @property
    def terminal(self) -> bool:
        return self.phase in (Phase.DONE, Phase.FAILED)

    def label(self) -> str:
        if self.phase in (Phase.TRACK, Phase.SEARCH):
            return f"{self.phase.value}({self.k})"
        if self.phase == Phase.CROSS_GATE:
            return f"CrossGate({self.k}, {self.leg.value})"
        if self.phase == Phase.AVOID_LOCKED:
            return f"AvoidLocked({self.maneuver.kind.value})"
        if self.phase == Phase.FAILED:
            return f"Failed({self.reason.value})"
        return self.phase.value


def search_command(hint: SearchHint, params: MissionParams) -> Tuple[VelocityCommand, bool]:
    """
    Motion for searching in the hinted direction. The flag marks an
    unknown-direction search, which must account for a full 360 degree sweep.
    """
    if hint == SearchHint.LEFT:
        return VelocityCommand(wz=params.search_yaw_rate), False
    if hint == SearchHint.RIGHT:
        return VelocityCommand(wz=-params.search_yaw_rate), False
    if hint == SearchHint.UP:
        return VelocityCommand(vz=params.search_vz), False
    if hint == SearchHint.DOWN:
        return VelocityCommand(vz=-params.search_vz), False
    return VelocityCommand(wz=params.search_yaw_rate), True


def _altitude_hold(target: float, altitude: float, params: MissionParams) -> VelocityCommand:
    vz = float(np.clip(params.k_alt * (target - altitude), -params.climb_rate, params.climb_rate))
    return VelocityCommand(vz=vz)


def crossing_distance(scene: WorldScene, k: int, z_star: float) -> float:
    """Forward travel from the converged tracking pose to pass_clearance beyond the gate plane."""
    tag = scene.tags[k]
    gate = scene.gate_for(tag.id)
    offset = float((np.asarray(gate.center) - np.asarray(tag.center)) @ np.asarray(tag.normal))
    return z_star - offset + gate.depth + gate.pass_clearance


def _maneuver_for(direction: Direction, params: MissionParams) -> Optional[AvoidManeuver]:
    kinds = {
        Direction.LEFT: ManeuverKind.RIGHT_TURN_FORWARD,
        Direction.RIGHT: ManeuverKind.LEFT_TURN_FORWARD,
    }
    if direction == Direction.CENTER:
        if params.center_policy != "hold":
            return None
        return AvoidManeuver(
            kind=ManeuverKind.HOLD_FORWARD, duration=params.avoid_duration,
            yaw_rate=0.0, forward_speed=params.center_forward_speed,
            turn_fraction=params.turn_fraction,
        )
    return AvoidManeuver(
        kind=kinds[direction], duration=params.avoid_duration,
        yaw_rate=params.avoid_yaw_rate, forward_speed=params.avoid_forward_speed,
        turn_fraction=params.turn_fraction,
    )


def _next_target(state: MissionState, scene: WorldScene) -> MissionState:
    if state.k < scene.n:
        return replace(state, phase=Phase.SEARCH, k=state.k + 1, consec_hits=0, lost_time=0.0,
                       search_yaw_accum=0.0, search_elapsed=0.0, search_from_lost=False, leg=None)
    return replace(state, phase=Phase.DONE, leg=None)


def _enter_search(state: MissionState, k: int, from_lost: bool) -> MissionState:
    return replace(state, phase=Phase.SEARCH, k=k, consec_hits=0, lost_time=0.0,
                   search_yaw_accum=0.0, search_elapsed=0.0, search_from_lost=from_lost)


def _enter_track(state: MissionState) -> MissionState:
    return replace(state, phase=Phase.TRACK, consec_hits=0, lost_time=0.0,
                   maneuver=None, elapsed=0.0, leg=None)


def _step_track(state, obs, servo_cmd, avoid, scene, params, dt, desired):
    if avoid is not None and avoid.white_fraction >= params.area_min:
        maneuver = _maneuver_for(avoid.direction, params)
        if maneuver is not None:
            new = replace(state, phase=Phase.AVOID_LOCKED, maneuver=maneuver, elapsed=0.0,
                          consec_hits=0, avoid_maneuvers=state.avoid_maneuvers + 1)
            return new, ManeuverCmd(maneuver.command_at(0.0), CommandSource.AVOID)

    if obs is not None and obs.valid and servo_cmd is not None:
        err = float(np.linalg.norm(feature_error(obs, desired)))
        hits = state.consec_hits + 1 if err < params.eps_track else 0
        if hits < params.n_hold:
            return replace(state, consec_hits=hits, lost_time=0.0), ManeuverCmd(servo_cmd, CommandSource.SERVO)
        tracked = replace(state, consec_hits=0, lost_time=0.0, tags_tracked=state.tags_tracked + 1)
        if scene.gate_for(scene.tags[state.k].id) is not None:
            return replace(tracked, phase=Phase.CROSS_GATE, leg=GateLeg.UP, leg_elapsed=0.0), ManeuverCmd(HOLD, CommandSource.GATE)
        return _next_target(tracked, scene), ManeuverCmd(HOLD, CommandSource.HOLD)

    lost = state.lost_time + dt
    if lost >= params.t_lost:
        return _enter_search(state, state.k, from_lost=True), ManeuverCmd(HOLD, CommandSource.HOLD)
    return replace(state, consec_hits=0, lost_time=lost), ManeuverCmd(HOLD, CommandSource.HOLD)


def _step_cross_gate(state, scene, params, dt, altitude, desired):
    gate = scene.gate_for(scene.tags[state.k].id)
    if state.leg == GateLeg.UP:
        target = gate.center[2]
        if abs(target - altitude) <= params.altitude_tolerance:
            return replace(state, leg=GateLeg.FORWARD, leg_elapsed=0.0), ManeuverCmd(VelocityCommand(vx=params.gate_forward_speed), CommandSource.GATE)
        return state, ManeuverCmd(_altitude_hold(target, altitude, params), CommandSource.GATE)

    if state.leg == GateLeg.FORWARD:
        travelled = (state.leg_elapsed + dt) * params.gate_forward_speed
        if travelled >= crossing_distance(scene, state.k, desired.z_star) - DIST_EPS:
            return replace(state, leg=GateLeg.DOWN, leg_elapsed=0.0), ManeuverCmd(HOLD, CommandSource.GATE)
        return replace(state, leg_elapsed=state.leg_elapsed + dt), ManeuverCmd(VelocityCommand(vx=params.gate_forward_speed), CommandSource.GATE)

    target = scene.cruise_altitude
    if abs(target - altitude) <= params.altitude_tolerance:
        passed = replace(state, gates_passed=state.gates_passed + 1)
        return _next_target(passed, scene), ManeuverCmd(HOLD, CommandSource.HOLD)
    return state, ManeuverCmd(_altitude_hold(target, altitude, params), CommandSource.GATE)


def _step_search(state, obs, servo_cmd, scene, params, dt):
    if obs is not None and obs.valid:
        cmd = ManeuverCmd(servo_cmd, CommandSource.SERVO) if servo_cmd is not None else ManeuverCmd(HOLD, CommandSource.HOLD)
        return _enter_track(state), cmd

    elapsed = state.search_elapsed + dt
    if elapsed >= params.search_budget:
        reason = FailureReason.TARGET_LOST if state.search_from_lost else FailureReason.SEARCH_TIMEOUT
        return replace(state, phase=Phase.FAILED, reason=reason, search_elapsed=elapsed), ManeuverCmd(HOLD, CommandSource.HOLD)

    hint = scene.tags[state.k].search_hint
    vertical_time = params.vertical_search_span / params.search_vz
    if hint in (SearchHint.UP, SearchHint.DOWN) and state.search_elapsed >= vertical_time:
        hint = SearchHint.UNKNOWN
    cmd, _ = search_command(hint, params)
    if state.search_yaw_accum >= TWO_PI and cmd.wz != 0.0:
        cmd = HOLD
    accum = min(TWO_PI, state.search_yaw_accum + abs(cmd.wz) * dt)
    return replace(state, search_elapsed=elapsed, search_yaw_accum=accum), ManeuverCmd(cmd, CommandSource.SEARCH)


def _step_avoid(state, params, dt):
    maneuver = state.maneuver
    if state.elapsed >= maneuver.duration:
        return _enter_track(state), ManeuverCmd(HOLD, CommandSource.HOLD)
    cmd = maneuver.command_at(state.elapsed)
    return replace(state, elapsed=state.elapsed + dt), ManeuverCmd(cmd, CommandSource.AVOID)


def step_mission(
    state: MissionState,
    obs: Optional[FeatureVec],
    servo_cmd: Optional[VelocityCommand],
    avoid: Optional[AvoidCommandMsg],
    scene: WorldScene,
    params: MissionParams,
    dt: float,
    *,
    altitude: float,
    desired: DesiredFeatures,
) -> Tuple[MissionState, ManeuverCmd]:
    """
    Advances the switching law by one control tick.

    `obs` are the features of the current target (scene.tags[state.k]),
    `servo_cmd` the body-frame IBVS command computed from them and `avoid`
    the newest unconsumed perception command, if any. Avoidance commands only
    act in Track; CrossGate, Search and AvoidLocked discard them.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if servo_cmd is not None and servo_cmd.frame != CommandFrame.BODY:
        raise ValueError("servo command must be in the body frame")

    if state.phase == Phase.TAKEOFF:
        if abs(scene.cruise_altitude - altitude) <= params.altitude_tolerance:
            if obs is not None and obs.valid:
                new, cmd = _enter_track(state), ManeuverCmd(HOLD, CommandSource.HOLD)
            else:
                new, cmd = _enter_search(state, 0, from_lost=False), ManeuverCmd(HOLD, CommandSource.HOLD)
        else:
            new, cmd = state, ManeuverCmd(_altitude_hold(scene.cruise_altitude, altitude, params), CommandSource.HOLD)
    elif state.phase == Phase.TRACK:
        new, cmd = _step_track(state, obs, servo_cmd, avoid, scene, params, dt, desired)
    elif state.phase == Phase.CROSS_GATE:
        new, cmd = _step_cross_gate(state, scene, params, dt, altitude, desired)
    elif state.phase == Phase.SEARCH:
        new, cmd = _step_search(state, obs, servo_cmd, scene, params, dt)
    elif state.phase == Phase.AVOID_LOCKED:
        new, cmd = _step_avoid(state, params, dt)
    else:
        new, cmd = state, ManeuverCmd(HOLD, CommandSource.HOLD)

    if new.phase != state.phase or new.k != state.k or new.leg != state.leg:
        logger.info("[Mission] %s -> %s", state.label(), new.label())
    return new, cmd
