"""
Coupled simulation of one mission run.

Everything runs on a simulated clock in 1 ms ticks: dynamics and the rate
loop every tick, tag observation / IBVS / switching law at 20 Hz, a
pseudo-depth frame per perception period and logging plus collision checks
at 100 Hz. Perception is exchanged in lockstep: each frame waits for the
datagram carrying its seq, so in-process and two-process runs match.
"""
import asyncio
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from src import perception_worker
from src.features import calibrate_desired, feature_vector
from src.link import ControllerLink, FrameKind, FrameMessage, frame_to_stream, run_channel_pair
from src.mission import MissionState, Phase, step_mission
from src.percept import DecisionParams, Direction
from src.schemas import CommandLogEntry, MissionReport, Outcome, RunConfig
from src.servo import camera_to_body, ibvs_velocity
from src.simcam import level_camera_pose, observe_tag, render_pseudo_depth
from src.vehicle import FlightController, QuadState, step_dynamics
from src.world import WorldScene, load_scenario_file, validate_spacing

logger = logging.getLogger(__name__)

TICK = 0.001
MISSION_EVERY = 50
LOG_EVERY = 10
PROJECT_ROOT = Path(__file__).resolve().parent.parent


class SimClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self) -> float:
        return self.t


def perception_params(config: RunConfig) -> DecisionParams:
    """Decision parameters at the run's perception rate; frames go out every period_ms ticks."""
    return config.decision.model_copy(update={"rate_hz": config.perception_rate_hz})


def obstacle_clearance(scene: WorldScene, position) -> float:
    return min(o.surface_distance(position) for o in scene.obstacles)


class PerceptionSession:
    """Controller-side lockstep exchange with an in-process task or a child process."""

    def __init__(self, config: RunConfig, scene: WorldScene, clock: SimClock,
                 frame_sink: Optional[Callable[[bytes], None]]):
        self.config = config
        self.scene = scene
        self.clock = clock
        self.frame_sink = frame_sink
        self.decision = perception_params(config)
        self.intr = config.camera.intrinsics().scaled(config.depth.downscale)
        self.link: Optional[ControllerLink] = None
        self.task: Optional[asyncio.Task] = None
        self.proc = None
        self.seq = 0
        self.lost = 0

    async def start(self):
        cfg = self.config.link
        self.link = await run_channel_pair(cfg.frame_addr, cfg.command_addr, cfg.staleness_window, clock=self.clock)
        if self.config.two_process:
            env = dict(os.environ)
            env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(PROJECT_ROOT), env.get("PYTHONPATH")]))
            self.proc = await asyncio.create_subprocess_exec(
                sys.executable, "-m", "src.perception_worker",
                "--frame-addr", self.link.frame_addr,
                "--cmd-addr", self.link.command_addr,
                "--params", self.decision.model_dump_json(),
                cwd=str(PROJECT_ROOT), env=env,
            )
            logger.info("[Runner] Perception process started (pid %d)", self.proc.pid)
        else:
            self.task = asyncio.create_task(
                perception_worker.serve(self.link.frame_addr, self.link.command_addr, self.decision))
        if not await self.link.wait_connected(cfg.reply_timeout):
            logger.warning("[Runner] Perception did not connect within %.1f s; frames are buffered", cfg.reply_timeout)

    async def exchange(self, position, yaw: float, tick: int):
        pose = level_camera_pose(position, yaw)
        depth_cfg = self.config.depth
        timestamp_us = tick * 1000
        if self.decision.align:
            reference = render_pseudo_depth(pose, self.scene, self.intr)
            await self._send(FrameMessage.from_depth(reference, self.seq, timestamp_us, FrameKind.REFERENCE))
        depth = render_pseudo_depth(
            pose, self.scene, self.intr,
            affine=(depth_cfg.scale, depth_cfg.shift),
            noise_sigma=depth_cfg.noise_sigma,
            rng_seed=self.config.seed,
            frame_index=self.seq,
        )
        await self._send(FrameMessage.from_depth(depth, self.seq, timestamp_us))
        if not await self.link.wait_for_command(self.seq, self.config.link.reply_timeout):
            self.lost += 1
            logger.warning("[Runner] No command for frame %d, continuing without one", self.seq)
        self.seq += 1

    async def _send(self, msg: FrameMessage):
        if self.frame_sink is not None:
            self.frame_sink(frame_to_stream(msg))
        await self.link.send_frame(msg)

    def take_new(self):
        return self.link.take_new(self.clock())

    async def close(self):
        if self.link is not None:
            await self.link.close()
        if self.task is not None:
            try:
                await asyncio.wait_for(self.task, self.config.link.reply_timeout)
            except Exception as e:
                logger.warning("[Runner] Perception task ended with %s", e)
        if self.proc is not None:
            try:
                await asyncio.wait_for(self.proc.wait(), self.config.link.reply_timeout)
            except asyncio.TimeoutError:
                logger.warning("[Runner] Perception process did not exit, killing it")
                self.proc.kill()
                await self.proc.wait()


async def run_mission(
    config: RunConfig,
    scene: Optional[WorldScene] = None,
    frame_sink: Optional[Callable[[bytes], None]] = None,
) -> MissionReport:
    """
    Simulates one mission until Done, Failed, Collision or Timeout.
    Scenario and config errors are raised before the simulation starts.
    """
    if scene is None:
        scene = load_scenario_file(config.scenario)
    for warning in validate_spacing(scene):
        logger.warning("[Runner] %s", warning)

    intr = config.camera.intrinsics()
    desired = [calibrate_desired(tag.side, intr, config.z_star) for tag in scene.tags]
    perception_every = perception_params(config).period_ms  # TICK is 1 ms
    duration_ticks = int(round(config.duration / TICK))
    mission_dt = MISSION_EVERY * TICK

    clock = SimClock()
    state = QuadState.at_rest(config.start_position, config.start_yaw)
    controller = FlightController(config.quad, config.gains, initial_yaw=config.start_yaw, dt=TICK)
    mission = MissionState()
    v_ref = np.zeros(3)
    wz_ref = 0.0

    trajectory: List[tuple] = []
    velocity_log: List[tuple] = []
    yawrate_log: List[tuple] = []
    commands: List[CommandLogEntry] = []
    min_clearance = math.inf
    timings: Dict[str, float] = {"render_and_link": 0.0, "guidance": 0.0, "flight": 0.0}

    session = None
    if config.avoidance:
        session = PerceptionSession(config, scene, clock, frame_sink)
        await session.start()

    logger.info("[Runner] Starting run: scenario=%s seed=%d avoidance=%s two_process=%s",
                config.scenario, config.seed, config.avoidance, config.two_process)
    outcome = None
    tick = 0
    try:
        while True:
            t = tick * TICK
            clock.t = t
            if tick % LOG_EVERY == 0:
                p, v = state.position, state.velocity
                trajectory.append((t, p[0], p[1], p[2]))
                velocity_log.append((t, v_ref[0], v[0], v_ref[1], v[1], v_ref[2], v[2]))
                yawrate_log.append((t, wz_ref, state.omega[2]))
                if scene.obstacles:
                    clearance = obstacle_clearance(scene, p)
                    min_clearance = min(min_clearance, clearance)
                    if clearance <= config.hull_radius:
                        logger.info("[Runner] Collision at t=%.2f s, position %s", t, np.round(p, 3).tolist())
                        outcome = Outcome.COLLISION
                        break
            if tick >= duration_ticks:
                outcome = Outcome.TIMEOUT
                break

            if session is not None and tick % perception_every == 0:
                started = time.perf_counter()
                await session.exchange(state.position, state.yaw, tick)
                timings["render_and_link"] += time.perf_counter() - started

            if tick % MISSION_EVERY == 0:
                started = time.perf_counter()
                yaw = state.yaw
                k = mission.k
                tag = scene.tags[k]
                obs = observe_tag(level_camera_pose(state.position, yaw), tag, intr, scene.obstacles)
                q = feature_vector(obs, intr, desired[k]) if obs is not None else None
                servo = ibvs_velocity(q, desired[k], config.servo) if q is not None else None
                body = camera_to_body(servo) if servo is not None else None
                avoid = session.take_new() if session is not None else None
                if avoid is not None and avoid.direction != Direction.CENTER:
                    commands.append(CommandLogEntry(t=t, seq=avoid.seq, direction=avoid.direction,
                                                    white_fraction=avoid.white_fraction))
                mission, cmd = step_mission(mission, q, body, avoid, scene, config.mission, mission_dt,
                                            altitude=float(state.position[2]), desired=desired[k])
                timings["guidance"] += time.perf_counter() - started
                if mission.terminal:
                    outcome = Outcome.DONE if mission.phase == Phase.DONE else Outcome.FAILED
                    break
                vel = cmd.velocity
                c, s = math.cos(yaw), math.sin(yaw)
                v_ref = np.array([c * vel.vx - s * vel.vy, s * vel.vx + c * vel.vy, vel.vz])
                wz_ref = vel.wz

            started = time.perf_counter()
            rotors = controller.step(state, v_ref, wz_ref)
            state = step_dynamics(state, rotors, config.quad, TICK)
            timings["flight"] += time.perf_counter() - started
            tick += 1
    finally:
        if session is not None:
            await session.close()

    duration = tick * TICK
    logger.info("[Runner] Run ended: %s after %.2f s (%s)", outcome.value, duration, mission.label())
    logger.info("[Runner] Timings: %s", {k: round(v, 3) for k, v in timings.items()})
    if session is not None and session.lost:
        logger.warning("[Runner] %d perception replies were lost", session.lost)

    return MissionReport(
        outcome=outcome,
        failure_reason=mission.reason if outcome == Outcome.FAILED else None,
        min_obstacle_clearance=min_clearance if scene.obstacles else None,
        gates_passed=mission.gates_passed,
        tags_tracked=mission.tags_tracked,
        avoid_maneuvers=mission.avoid_maneuvers,
        duration=duration,
        trajectory=trajectory,
        velocity=velocity_log,
        yawrate=yawrate_log,
        commands=commands,
    )
