"""
Image moments of a tag's corner points and the IBVS feature vector
q = (x_n, y_n, a_n, f_yaw) built from them.
"""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from src.simcam import CameraIntrinsics, TagObservation, level_camera_pose, project_points
from src.world import TagSpec

RHO_MIN = 1e-3
A_MIN = 1e-12
DEFAULT_Z_STAR = 1.2

Point = Tuple[float, float]


class EmptyPointSetError(ValueError):
    pass


def raw_moments(points: Sequence[Point]) -> Tuple[float, float, float]:
    """(m00, m10, m01) of a discrete point set."""
    if len(points) == 0:
        raise EmptyPointSetError("moments of an empty point set are undefined")
    m10 = math.fsum(p[0] for p in points)
    m01 = math.fsum(p[1] for p in points)
    return float(len(points)), m10, m01


def centered_moments(points: Sequence[Point]) -> Tuple[float, float, float, float, float]:
    """
    (mu20, mu02, mu11, xg, yg). The centroid divides by the point count.
    """
    m00, m10, m01 = raw_moments(points)
    xg, yg = m10 / m00, m01 / m00
    mu20 = math.fsum((p[0] - xg) ** 2 for p in points)
    mu02 = math.fsum((p[1] - yg) ** 2 for p in points)
    mu11 = math.fsum((p[0] - xg) * (p[1] - yg) for p in points)
    return mu20, mu02, mu11, xg, yg


@dataclass(frozen=True)
class MomentSet:
    m00: float
    m10: float
    m01: float
    mu20: float
    mu02: float
    mu11: float
    xg: float
    yg: float

    @property
    def a(self) -> float:
        return self.mu20 + self.mu02

    @classmethod
    def of(cls, points: Sequence[Point]) -> "MomentSet":
        m00, m10, m01 = raw_moments(points)
        mu20, mu02, mu11, xg, yg = centered_moments(points)
        return cls(m00, m10, m01, mu20, mu02, mu11, xg, yg)


@dataclass(frozen=True)
class FeatureVec:
    xn: float
    yn: float
    an: float
    fyaw: float
    valid: bool = True
    xg: float = 0.0
    yg: float = 0.0
    theta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.xn, self.yn, self.an, self.fyaw])


INVALID_FEATURES = FeatureVec(xn=0.0, yn=0.0, an=0.0, fyaw=0.0, valid=False)


@dataclass(frozen=True)
class DesiredFeatures:
    z_star: float
    a_star: float

    def __post_init__(self):
        if not (0.3 <= self.z_star <= 4.0):
            raise ValueError(f"z_star must lie in the detector range [0.3, 4.0], got {self.z_star}")
        if self.a_star <= 0:
            raise ValueError(f"a_star must be positive, got {self.a_star}")

    @property
    def q_star(self) -> FeatureVec:
        return FeatureVec(xn=0.0, yn=0.0, an=self.z_star, fyaw=math.pi / 2)


def normalized_points(obs: TagObservation, intr: CameraIntrinsics) -> list:
    return [((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy) for u, v in obs.corners]


def calibrate_desired(tag_side: float, intr: CameraIntrinsics, z_star: float = DEFAULT_Z_STAR) -> DesiredFeatures:
    """
    Computes a* by projecting a fronto-parallel tag centered at distance z*
    with the run's own intrinsics.
    """
    tag = TagSpec(id=0, center=(z_star, 0.0, 0.0), normal=(-1.0, 0.0, 0.0), side=tag_side)
    pose = level_camera_pose((0.0, 0.0, 0.0), 0.0)
    pixels, _ = project_points(pose, tag.corners(), intr)
    obs = TagObservation(tag_id=tag.id, corners=pixels, range=z_star)
    moments = MomentSet.of(normalized_points(obs, intr))
    return DesiredFeatures(z_star=z_star, a_star=moments.a)


def feature_vector(obs: TagObservation, intr: CameraIntrinsics, des: DesiredFeatures) -> FeatureVec:
    moments = MomentSet.of(normalized_points(obs, intr))
    a = moments.a
    if a <= A_MIN:
        return INVALID_FEATURES
    an = des.z_star * math.sqrt(des.a_star / a)
    rho = max(RHO_MIN, math.hypot(moments.xg, moments.yg))
    return FeatureVec(
        xn=an * moments.xg,
        yn=an * moments.yg,
        an=an,
        fyaw=math.atan(1.0 / rho),
        valid=True,
        xg=moments.xg,
        yg=moments.yg,
        theta=math.atan2(moments.yg, moments.xg),
    )
