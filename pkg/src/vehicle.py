"""
Quadrotor rigid body and its cascaded flight controller.

Loops: velocity (PI, 100 Hz) -> attitude (P, 500 Hz) -> body rate (PID, 1 kHz)
-> X-configuration mixer -> Newton-Euler dynamics at 1 ms.
World frame x forward, y left, z up; body frame FLU. Quaternions use
scipy's (x, y, z, w) order.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]
Z_AXIS = np.array([0.0, 0.0, 1.0])
MIN_ACCEL = 0.1


class NonFiniteStateError(ArithmeticError):
    pass


class QuadParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    mass: float = Field(default=1.1485, gt=0)
    arm: float = Field(default=0.155, gt=0)
    thrust_to_weight: float = Field(default=4.0, gt=0)
    inertia: Vec3 = (0.015, 0.015, 0.025)
    k_q: float = Field(default=0.016, gt=0)
    g: float = Field(default=9.81, gt=0)
    ground_contact: bool = True

    @model_validator(mode="after")
    def _positive_inertia(self) -> "QuadParams":
        if any(i <= 0 for i in self.inertia):
            raise ValueError(f"inertia must be positive definite, got diag {self.inertia}")
        return self

    @property
    def max_total_thrust(self) -> float:
        return self.thrust_to_weight * self.mass * self.g

    @property
    def max_rotor_thrust(self) -> float:
        return self.max_total_thrust / 4.0

    @property
    def lever(self) -> float:
        return self.arm / math.sqrt(2.0)

    @property
    def allocation(self) -> np.ndarray:
        return _allocation(self.lever, self.k_q)[0]

    @property
    def allocation_inv(self) -> np.ndarray:
        return _allocation(self.lever, self.k_q)[1]


@lru_cache(maxsize=16)
def _allocation(lever: float, k_q: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Matrix mapping rotor thrusts to (T, tau_x, tau_y, tau_z), and its inverse.
    Rotors: 1 front-right CCW, 2 rear-left CCW, 3 front-left CW, 4 rear-right CW.
    """
    l, k = lever, k_q
    a = np.array([
        [1.0, 1.0, 1.0, 1.0],
        [-l, l, l, -l],
        [-l, l, -l, l],
        [-k, -k, k, k],
    ])
    a.setflags(write=False)
    inv = np.linalg.inv(a)
    inv.setflags(write=False)
    return a, inv


class LoopGains(BaseModel):
    model_config = ConfigDict(frozen=True)

    vel_kp: Vec3 = (2.0, 2.0, 3.0)
    vel_ki: Vec3 = (0.3, 0.3, 0.6)
    vel_int_clamp: float = Field(default=1.0, gt=0)
    att_kp: Vec3 = (6.0, 6.0, 3.0)
    rate_kp: Vec3 = (0.25, 0.25, 0.2)
    rate_ki: Vec3 = (0.1, 0.1, 0.05)
    rate_kd: Vec3 = (0.003, 0.003, 0.0)
    rate_int_clamp: float = Field(default=0.5, gt=0)
    max_tilt_deg: Optional[float] = Field(default=35.0, gt=0, lt=90)

    @model_validator(mode="after")
    def _positive_p(self) -> "LoopGains":
        for name in ("vel_kp", "att_kp", "rate_kp"):
            if any(g <= 0 for g in getattr(self, name)):
                raise ValueError(f"{name} must be positive")
        if not (math.isfinite(self.vel_int_clamp) and math.isfinite(self.rate_int_clamp)):
            raise ValueError("integral clamps must be finite")
        return self


@dataclass
class QuadState:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotor_thrusts: np.ndarray = field(default_factory=lambda: np.zeros(4))

    @property
    def yaw(self) -> float:
        r = Rotation.from_quat(self.attitude).as_matrix()
        return math.atan2(r[1, 0], r[0, 0])

    @classmethod
    def at_rest(cls, position: Vec3, yaw: float = 0.0) -> "QuadState":
        q = Rotation.from_euler("z", yaw).as_quat()
        return cls(position=np.asarray(position, dtype=float), attitude=q)


@dataclass
class PIDState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))
    last_measurement: Optional[np.ndarray] = None


def velocity_loop(v_ref, v, gains: LoopGains, state: PIDState, dt: float, g: float = 9.81) -> np.ndarray:
    """
    a = Kp e + Ki int(e) + g z. The output uses the integral accumulated up
    to the previous sample; the integral is then advanced and clamped.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    e = np.asarray(v_ref, dtype=float) - np.asarray(v, dtype=float)
    accel = np.asarray(gains.vel_kp) * e + np.asarray(gains.vel_ki) * state.integral + g * Z_AXIS
    state.integral = np.clip(state.integral + e * dt, -gains.vel_int_clamp, gains.vel_int_clamp)
    return accel


def accel_to_attitude(
    accel_cmd,
    yaw_ref: float,
    params: QuadParams,
    last: Optional[Tuple[np.ndarray, float]] = None,
) -> Tuple[np.ndarray, float]:
    """
    Attitude whose body z axis points along the commanded acceleration, with
    heading yaw_ref, and the collective thrust m |a| (saturated). Below
    0.1 m/s^2 the direction is meaningless and `last` is held.
    """
    a = np.asarray(accel_cmd, dtype=float)
    norm = float(np.linalg.norm(a))
    if norm < MIN_ACCEL:
        if last is not None:
            return last
        return Rotation.from_euler("z", yaw_ref).as_quat(), 0.0
    b3 = a / norm
    heading = np.array([math.cos(yaw_ref), math.sin(yaw_ref), 0.0])
    b2 = np.cross(b3, heading)
    if np.linalg.norm(b2) < 1e-9:
        b2 = np.cross(b3, np.array([0.0, 0.0, 1.0]) if abs(b3[2]) < 0.9 else np.array([1.0, 0.0, 0.0]))
    b2 /= np.linalg.norm(b2)
    b1 = np.cross(b2, b3)
    quat = Rotation.from_matrix(np.column_stack([b1, b2, b3])).as_quat()
    thrust = min(params.mass * norm, params.max_total_thrust)
    return quat, thrust


def limit_tilt(accel, max_tilt_deg: Optional[float]) -> np.ndarray:
    """Shrinks the horizontal part of a thrust acceleration to stay within the tilt limit."""
    a = np.array(accel, dtype=float)
    if max_tilt_deg is None:
        return a
    a[2] = max(a[2], MIN_ACCEL)
    horizontal = math.hypot(a[0], a[1])
    limit = a[2] * math.tan(math.radians(max_tilt_deg))
    if horizontal > limit:
        a[:2] *= limit / horizontal
    return a


def attitude_loop(quat_cmd, quat, yaw_rate_ff: float, gains: LoopGains) -> np.ndarray:
    """Body rate command from the shortest rotation between attitude and command, plus yaw feedforward."""
    error = (Rotation.from_quat(quat).inv() * Rotation.from_quat(quat_cmd)).as_rotvec()
    return np.asarray(gains.att_kp) * error + np.array([0.0, 0.0, yaw_rate_ff])


def rate_loop_pid(rate_cmd, omega, gains: LoopGains, state: PIDState, dt: float) -> np.ndarray:
    """
    PID on body-rate error with the derivative taken on the measured rate.
    The output uses the integral from the previous sample.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    omega = np.asarray(omega, dtype=float)
    e = np.asarray(rate_cmd, dtype=float) - omega
    if state.last_measurement is None:
        d_meas = np.zeros(3)
    else:
        d_meas = (omega - state.last_measurement) / dt
    torque = (np.asarray(gains.rate_kp) * e
              + np.asarray(gains.rate_ki) * state.integral
              - np.asarray(gains.rate_kd) * d_meas)
    state.integral = np.clip(state.integral + e * dt, -gains.rate_int_clamp, gains.rate_int_clamp)
    state.last_measurement = omega.copy()
    return torque


def mixer(thrust: float, torque, params: QuadParams) -> np.ndarray:
    """
    Rotor thrusts for (thrust, torque). When a rotor would leave
    [0, max/4], yaw torque is scaled back first; whatever still does not fit
    is clipped.
    """
    if thrust < 0:
        raise ValueError(f"thrust must be non-negative, got {thrust}")
    tau = np.asarray(torque, dtype=float)
    inv = params.allocation_inv
    base = inv @ np.array([thrust, tau[0], tau[1], 0.0])
    yaw = inv @ np.array([0.0, 0.0, 0.0, tau[2]])
    lo, hi = 0.0, params.max_rotor_thrust

    scale = 1.0
    if np.any(base < lo) or np.any(base > hi):
        scale = 0.0
    else:
        for b, y in zip(base, yaw):
            if y > 0:
                scale = min(scale, (hi - b) / y)
            elif y < 0:
                scale = min(scale, (lo - b) / y)
        scale = max(0.0, scale)
    return np.clip(base + scale * yaw, lo, hi)


def step_dynamics(state: QuadState, rotor_thrusts, params: QuadParams, dt: float) -> QuadState:
    """
    One Newton-Euler step. Translation uses the trapezoidal position update
    (exact under constant acceleration); rotation is semi-implicit, the new
    body rate drives the attitude update.
    """
    if not (0 < dt <= 0.01):
        raise ValueError(f"dt must lie in (0, 0.01], got {dt}")
    f = np.clip(np.asarray(rotor_thrusts, dtype=float), 0.0, params.max_rotor_thrust)
    wrench = params.allocation @ f
    rot = Rotation.from_quat(state.attitude)

    accel = rot.apply(np.array([0.0, 0.0, wrench[0]])) / params.mass - params.g * Z_AXIS
    velocity = state.velocity + accel * dt
    position = state.position + 0.5 * (state.velocity + velocity) * dt

    inertia = np.asarray(params.inertia)
    omega = state.omega
    omega_dot = (wrench[1:] - np.cross(omega, inertia * omega)) / inertia
    omega = omega + omega_dot * dt
    attitude = (rot * Rotation.from_rotvec(omega * dt)).as_quat()

    if params.ground_contact and position[2] <= 0.0:
        position[2] = 0.0
        if velocity[2] < 0.0:
            velocity[2] = 0.0

    for part in (position, velocity, attitude, omega):
        if not np.all(np.isfinite(part)):
            raise NonFiniteStateError("vehicle state became non-finite")
    return QuadState(position=position, velocity=velocity, attitude=attitude, omega=omega, rotor_thrusts=f)


class FlightController:
    """
    Multi-rate cascade driven once per 1 ms tick. Velocity references are
    world-frame; the yaw reference is integrated from the commanded yaw rate,
    which also feeds the attitude loop as feedforward.
    """

    VELOCITY_EVERY = 10
    ATTITUDE_EVERY = 2

    def __init__(self, params: QuadParams, gains: LoopGains, initial_yaw: float = 0.0, dt: float = 0.001):
        self.params = params
        self.gains = gains
        self.dt = dt
        self.tick = 0
        self.yaw_ref = initial_yaw
        self.vel_state = PIDState()
        self.rate_state = PIDState()
        self.att_cmd: Optional[Tuple[np.ndarray, float]] = None
        self.rate_cmd = np.zeros(3)

    def step(self, state: QuadState, v_ref, wz_ref: float) -> np.ndarray:
        if self.tick % self.VELOCITY_EVERY == 0:
            dt_v = self.dt * self.VELOCITY_EVERY
            self.yaw_ref = math.remainder(self.yaw_ref + wz_ref * dt_v, 2.0 * math.pi)
            accel = velocity_loop(v_ref, state.velocity, self.gains, self.vel_state, dt_v, self.params.g)
            accel = limit_tilt(accel, self.gains.max_tilt_deg)
            self.att_cmd = accel_to_attitude(accel, self.yaw_ref, self.params, self.att_cmd)
        if self.tick % self.ATTITUDE_EVERY == 0:
            self.rate_cmd = attitude_loop(self.att_cmd[0], state.attitude, wz_ref, self.gains)
        torque = rate_loop_pid(self.rate_cmd, state.omega, self.gains, self.rate_state, self.dt)
        self.tick += 1
        return mixer(self.att_cmd[1], torque, self.params)


def hover_thrusts(params: QuadParams) -> np.ndarray:
    return np.full(4, params.mass * params.g / 4.0)
