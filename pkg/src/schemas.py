import math
import sys
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.config import CMD_ADDR, FRAME_ADDR, REPLY_TIMEOUT
from src.mission import FailureReason, MissionParams
from src.percept import DecisionParams, Direction
from src.servo import ServoGains
from src.simcam import CameraIntrinsics
from src.vehicle import LoopGains, QuadParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class RunConfigError(Exception):
    """Run configuration file is unreadable or invalid."""


class Outcome(str, Enum):
    DONE = "Done"
    FAILED = "Failed"
    COLLISION = "Collision"
    TIMEOUT = "Timeout"


EXIT_CODES = {
    Outcome.DONE: 0,
    Outcome.FAILED: 2,
    Outcome.COLLISION: 3,
    Outcome.TIMEOUT: 4,
}


class CameraConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(default=640, gt=0)
    height: int = Field(default=480, gt=0)
    hfov_deg: float = Field(default=69.4, gt=0, lt=180)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_hfov(self.width, self.height, math.radians(self.hfov_deg))


class DepthConfig(BaseModel):
    """Hidden distortion applied by the pseudo-depth renderer."""
    model_config = ConfigDict(frozen=True)

    scale: float = Field(default=0.9, gt=0)
    shift: float = 50.0
    noise_sigma: float = Field(default=2.0, ge=0)
    downscale: int = Field(default=4, ge=1)


class LinkConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_addr: str = FRAME_ADDR
    command_addr: str = CMD_ADDR
    staleness_window: float = Field(default=0.6, gt=0)
    reply_timeout: float = Field(default=REPLY_TIMEOUT, gt=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: str = "paper_fig3"
    seed: int = Field(default=1, ge=0)
    duration: float = Field(default=90.0, gt=0)
    perception_rate_hz: float = Field(default=4.0, gt=0)
    avoidance: bool = True
    two_process: bool = False
    z_star: float = Field(default=1.2, ge=0.3, le=4.0)
    start_position: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    start_yaw: float = 0.0
    hull_radius: float = Field(default=0.25, gt=0)
    out_dir: Optional[str] = None
    record_frames: bool = True

    servo: ServoGains = Field(default_factory=ServoGains)
    mission: MissionParams = Field(default_factory=MissionParams)
    decision: DecisionParams = Field(default_factory=DecisionParams)
    quad: QuadParams = Field(default_factory=QuadParams)
    gains: LoopGains = Field(default_factory=LoopGains)
    camera: CameraConfig = Field(default_factory=CameraConfig)
    depth: DepthConfig = Field(default_factory=DepthConfig)
    link: LinkConfig = Field(default_factory=LinkConfig)


def load_run_config(source: Union[str, Path]) -> RunConfig:
    """Reads a TOML run config. Missing keys keep their defaults."""
    try:
        data = tomllib.loads(Path(source).read_text(encoding="utf-8"))
    except OSError as e:
        raise RunConfigError(f"cannot read run config {source}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise RunConfigError(f"malformed run config {source}: {e}") from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise RunConfigError(f"invalid run config {source}: {e}") from e


class CommandLogEntry(BaseModel):
    t: float
    seq: int
    direction: Direction
    white_fraction: float


class MissionReport(BaseModel):
    """
    Result of one run. All logs share the simulated timebase (seconds); the
    trajectory, velocity and yaw-rate logs are sampled together at 100 Hz.
    """
    outcome: Outcome
    failure_reason: Optional[FailureReason] = None
    min_obstacle_clearance: Optional[float] = None
    gates_passed: int = 0
    tags_tracked: int = 0
    avoid_maneuvers: int = 0
    duration: float = 0.0
    trajectory: List[Tuple[float, float, float, float]] = Field(default_factory=list)
    velocity: List[Tuple[float, float, float, float, float, float, float]] = Field(default_factory=list)
    yawrate: List[Tuple[float, float, float]] = Field(default_factory=list)
    commands: List[CommandLogEntry] = Field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.outcome]

