"""
Perception decision path: pseudo-depth alignment, obstacle mask, mask
statistics and the LEFT / RIGHT / CENTER avoidance command.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.simcam import DepthMap

logger = logging.getLogger(__name__)

MIN_VARIANCE = 1e-12


class DegenerateFitError(ValueError):
    """Scale is unobservable: the predicted disparities are constant."""


class Direction(str, Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    CENTER = "CENTER"


class AvoidCommandMsg(BaseModel):
    model_config = ConfigDict(frozen=True)

    direction: Direction
    seq: int = Field(ge=0, lt=2 ** 32)
    white_fraction: float = Field(ge=0.0, le=1.0)


class DecisionParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: float = 900.0
    area_min: float = Field(default=0.05, ge=0, le=1)
    left_bound: float = Field(default=1.0 / 3.0, gt=0, lt=1)
    right_bound: float = Field(default=2.0 / 3.0, gt=0, lt=1)
    rate_hz: float = Field(default=4.0, gt=0)
    align: bool = False
    align_samples: int = Field(default=64, ge=2)

    @model_validator(mode="after")
    def _ordered(self) -> "DecisionParams":
        if not math.isfinite(self.tau):
            raise ValueError("tau must be finite")
        if self.left_bound > self.right_bound:
            raise ValueError("left partition bound must not exceed the right one")
        return self

    @property
    def period_ms(self) -> int:
        """Perception period in whole milliseconds, the simulator tick."""
        return max(1, int(round(1e3 / self.rate_hz)))

    @property
    def period_us(self) -> int:
        return self.period_ms * 1000


@dataclass(frozen=True)
class AffineFit:
    s: float
    t: float

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.s * values + self.t


@dataclass(frozen=True)
class ObstacleMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool


@dataclass(frozen=True)
class MaskStats:
    white_count: int
    white_fraction: float
    centroid_x: Optional[float] = None
    centroid_y: Optional[float] = None


def align_depth(d: Sequence[float], d_star: Sequence[float]) -> AffineFit:
    """
    Least-squares (s, t) minimizing sum (s * d_i + t - d*_i)^2, from the
    centered 2x2 normal equations.
    """
    x = np.asarray(d, dtype=float)
    y = np.asarray(d_star, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"disparity lists must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise DegenerateFitError("alignment needs at least two samples")
    x_mean, y_mean = x.mean(), y.mean()
    dx = x - x_mean
    sxx = float(dx @ dx)
    if sxx / x.size <= MIN_VARIANCE:
        raise DegenerateFitError("predicted disparities are constant; scale is unobservable")
    s = float(dx @ (y - y_mean)) / sxx
    return AffineFit(s=s, t=float(y_mean - s * x_mean))


def obstacle_mask(depth: DepthMap, tau: float) -> ObstacleMask:
    return ObstacleMask(width=depth.width, height=depth.height, bits=depth.values > tau)


def mask_stats(mask: ObstacleMask) -> MaskStats:
    ys, xs = np.nonzero(mask.bits)
    count = int(xs.size)
    fraction = count / (mask.width * mask.height)
    if count == 0:
        return MaskStats(white_count=0, white_fraction=fraction)
    return MaskStats(white_count=count, white_fraction=fraction,
                     centroid_x=float(xs.mean()), centroid_y=float(ys.mean()))


def decide_command(stats: MaskStats, width: int, params: DecisionParams) -> Direction:
    """
    Thirds partition on the mask centroid. Pixel centers sit at x + 0.5 so a
    mirrored mask lands in the mirrored third; the test is therefore
    centroid_x + 0.5 < left_bound * width, half a pixel off a bare index test.
    """
    if stats.white_count == 0 or stats.white_fraction < params.area_min:
        return Direction.CENTER
    x = stats.centroid_x + 0.5
    if x < params.left_bound * width:
        return Direction.LEFT
    if x > params.right_bound * width:
        return Direction.RIGHT
    return Direction.CENTER


def sample_grid(width: int, height: int, count: int) -> np.ndarray:
    """Flat indices of a roughly square grid of `count` pixels spread over the frame."""
    cols = max(2, int(round(math.sqrt(count * width / height))))
    rows = max(1, int(math.ceil(count / cols)))
    xs = np.linspace(0, width - 1, cols).round().astype(int)
    ys = np.linspace(0, height - 1, rows).round().astype(int)
    grid = (ys[:, None] * width + xs[None, :]).ravel()
    return grid[:count]


class PerceptionPipeline:
    """
    Decides one avoidance command per accepted frame.

    Frames closer than the perception period (simulated microseconds) to the
    last accepted one are dropped.
    """

    def __init__(self, params: DecisionParams):
        self.params = params
        self.last_accepted_us: Optional[int] = None
        self.dropped = 0

    def process(self, depth: DepthMap, seq: int, timestamp_us: int,
                reference: Optional[DepthMap] = None) -> Optional[AvoidCommandMsg]:
        if self.last_accepted_us is not None and timestamp_us - self.last_accepted_us < self.params.period_us:
            self.dropped += 1
            logger.warning("[Perception] Dropping frame %d, %d us after the last decision",
                           seq, timestamp_us - self.last_accepted_us)
            return None
        self.last_accepted_us = timestamp_us

        values = depth
        if self.params.align and reference is not None:
            idx = sample_grid(depth.width, depth.height, self.params.align_samples)
            try:
                fit = align_depth(depth.values.ravel()[idx], reference.values.ravel()[idx])
                values = DepthMap(depth.width, depth.height, fit.apply(depth.values))
            except DegenerateFitError as e:
                logger.warning("[Perception] Alignment skipped for frame %d: %s", seq, e)

        stats = mask_stats(obstacle_mask(values, self.params.tau))
        direction = decide_command(stats, depth.width, self.params)
        logger.debug("[Perception] frame %d: %s (white %.4f)", seq, direction.value, stats.white_fraction)
        return AvoidCommandMsg(direction=direction, seq=seq, white_fraction=round(stats.white_fraction, 4))
