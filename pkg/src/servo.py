"""
IBVS control law: feature error to a camera-frame velocity twist
(vx, vy, vz, wz), saturated, then re-expressed in the body frame.
"""
import math
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.features import DesiredFeatures, FeatureVec
from src.simcam import MOUNT


class ServoConfigError(ValueError):
    pass


class CommandFrame(str, Enum):
    CAMERA = "Camera"
    BODY = "Body"


class VelocityCommand(BaseModel):
    model_config = ConfigDict(frozen=True)

    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    wz: float = 0.0
    frame: CommandFrame = CommandFrame.BODY

    @model_validator(mode="after")
    def _finite(self) -> "VelocityCommand":
        if not all(math.isfinite(c) for c in (self.vx, self.vy, self.vz, self.wz)):
            raise ValueError("velocity command components must be finite")
        return self

    @property
    def linear(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.vz])


HOLD = VelocityCommand()


def _neg_identity() -> List[List[float]]:
    return (-np.eye(4)).tolist()


class ServoGains(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: Tuple[float, float, float, float] = Field(default=(0.4, 0.5, 0.5, 1.0), alias="lambda")
    L_hat: List[List[float]] = Field(default_factory=_neg_identity)
    v_max: float = Field(default=1.0, gt=0)
    w_max: float = Field(default=1.0, gt=0)

    @field_validator("lam")
    @classmethod
    def _positive(cls, value):
        if any(g <= 0 for g in value):
            raise ServoConfigError(f"servo gains must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _invertible(self) -> "ServoGains":
        m = np.asarray(self.L_hat, dtype=float)
        if m.shape != (4, 4):
            raise ServoConfigError(f"L_hat must be 4x4, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-9:
            raise ServoConfigError("L_hat is singular")
        return self

    @property
    def L_inv(self) -> np.ndarray:
        return np.linalg.inv(np.asarray(self.L_hat, dtype=float))


def feature_error(q: FeatureVec, des: DesiredFeatures) -> np.ndarray:
    """
    e = q - q*, with the yaw channel signed by the side the target sits on
    (f_yaw alone is symmetric about the optical axis).
    """
    q_star = des.q_star
    e_yaw = (q.fyaw - q_star.fyaw) * float(np.sign(q.xg))
    return np.array([q.xn - q_star.xn, q.yn - q_star.yn, q.an - q_star.an, e_yaw])


def saturate(cmd: np.ndarray, v_max: float, w_max: float) -> np.ndarray:
    """Per-channel clip, then shrink the linear part to fit |v| <= v_max."""
    out = np.array(cmd, dtype=float)
    out[:3] = np.clip(out[:3], -v_max, v_max)
    out[3] = float(np.clip(out[3], -w_max, w_max))
    norm = float(np.linalg.norm(out[:3]))
    if norm > v_max:
        out[:3] *= v_max / norm
    return out


def ibvs_velocity(q: FeatureVec, des: DesiredFeatures, gains: ServoGains) -> Optional[VelocityCommand]:
    """v_c = -diag(lambda) L_hat^-1 e, saturated. None when the features are unusable."""
    if not q.valid:
        return None
    e = feature_error(q, des)
    v = -np.asarray(gains.lam) * (gains.L_inv @ e)
    v = saturate(v, gains.v_max, gains.w_max)
    return VelocityCommand(vx=v[0], vy=v[1], vz=v[2], wz=v[3], frame=CommandFrame.CAMERA)


def camera_to_body(cmd: VelocityCommand, mount: np.ndarray = MOUNT) -> VelocityCommand:
    if cmd.frame != CommandFrame.CAMERA:
        raise ServoConfigError(f"expected a camera-frame command, got {cmd.frame.value}")
    m = np.asarray(mount, dtype=float)
    if m.shape != (3, 3) or not np.allclose(m @ m.T, np.eye(3), atol=1e-9) or np.linalg.det(m) <= 0:
        raise ServoConfigError("mount is not a rotation matrix")
    v = m @ cmd.linear
    return VelocityCommand(vx=v[0], vy=v[1], vz=v[2], wz=cmd.wz, frame=CommandFrame.BODY)
