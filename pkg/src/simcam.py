"""
Simulated RGB-D sensor.

Tag detection is geometric: the four tag corners are projected through a
pinhole model and gated by the detector's working range, facing angle, image
bounds and a single center-ray occlusion test. The pseudo-depth renderer
ray-casts the scene and distorts true nearness with a hidden scale/shift and
seeded noise, standing in for a monocular depth network.

Frames: camera optical (z forward, x right, y down). A CameraPose maps world
points into the camera, p_c = R @ p_w + t.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.world import CylinderObstacle, GateSpec, TagSpec, WorldScene

logger = logging.getLogger(__name__)

MIN_RANGE = 0.3
MAX_RANGE = 4.0
FACING_LIMIT = math.radians(75.0)
NEARNESS_K = 1000.0  # raw units at 1 m
FAR_PLANE = 20.0
NEAR_PLANE = 0.01  # m, anything nearer renders saturated
RAW_MAX = 1023.0
GATE_BAR = 0.05

# camera optical axes expressed in body FLU axes
MOUNT = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])

D435I_HFOV = math.radians(69.4)


class PoseError(ValueError):
    """Camera pose is non-finite or not a rigid transform."""


def _default_focal() -> float:
    return 320.0 / math.tan(D435I_HFOV / 2.0)


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(default_factory=_default_focal, gt=0)
    fy: float = Field(default_factory=_default_focal, gt=0)
    cx: float = 320.0
    cy: float = 240.0
    width: int = Field(default=640, gt=0)
    height: int = Field(default=480, gt=0)

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "CameraIntrinsics":
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")
        return self

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov: float) -> "CameraIntrinsics":
        f = (width / 2.0) / math.tan(hfov / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    @property
    def hfov(self) -> float:
        return 2.0 * math.atan(self.width / (2.0 * self.fx))

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the same lens sampled at 1/factor resolution."""
        return CameraIntrinsics(
            fx=self.fx / factor, fy=self.fy / factor,
            cx=self.cx / factor, cy=self.cy / factor,
            width=self.width // factor, height=self.height // factor,
        )


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise PoseError(f"pose needs a 3x3 rotation and a 3-vector, got {r.shape} and {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise PoseError("pose contains non-finite values")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise PoseError("pose rotation is not a proper rotation")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points_w: np.ndarray) -> np.ndarray:
        return np.asarray(points_w, dtype=float) @ self.rotation.T + self.translation


def level_camera_pose(position: Sequence[float], yaw: float) -> CameraPose:
    """
    Forward camera at `position`, turned by `yaw` about world z, with roll
    and pitch removed.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    r_wc = MOUNT.T @ rz.T
    p = np.asarray(position, dtype=float)
    return CameraPose(rotation=r_wc, translation=-r_wc @ p)


@dataclass(frozen=True)
class TagObservation:
    tag_id: int
    corners: np.ndarray  # (4, 2) pixels, BL, BR, TR, TL
    range: float


@dataclass(frozen=True)
class DepthMap:
    width: int
    height: int
    values: np.ndarray  # (height, width), raw pseudo inverse depth

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.height, self.width):
            raise ValueError(f"depth values have shape {v.shape}, expected {(self.height, self.width)}")
        object.__setattr__(self, "values", v)


def project_points(pose: CameraPose, points_w: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Returns pixel coordinates (N, 2) and z-depths (N,) of world points."""
    pc = pose.to_camera(points_w)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[:, 0] / z + intr.cx
        v = intr.fy * pc[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def _cylinder_hits(origin: np.ndarray, dirs: np.ndarray, cyl: CylinderObstacle) -> np.ndarray:
    """Nearest positive ray parameter hitting a closed vertical cylinder, inf when missed."""
    bx, by, bz = cyl.base_center
    top = bz + cyl.height
    fx, fy = origin[0] - bx, origin[1] - by
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    best = np.full(dx.shape, np.inf)

    a = dx * dx + dy * dy
    b = 2.0 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - cyl.radius ** 2
    disc = b * b - 4.0 * a * c
    ok = (a > 1e-12) & (disc >= 0.0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(ok, a, 1.0)
    for root in ((-b - sq) / (2.0 * safe_a), (-b + sq) / (2.0 * safe_a)):
        z = origin[2] + root * dz
        hit = ok & (root > 1e-9) & (z >= bz) & (z <= top)
        best = np.where(hit & (root < best), root, best)

    with np.errstate(divide="ignore", invalid="ignore"):
        for plane in (bz, top):
            root = (plane - origin[2]) / dz
            px = fx + root * dx
            py = fy + root * dy
            hit = np.isfinite(root) & (root > 1e-9) & (px * px + py * py <= cyl.radius ** 2)
            best = np.where(hit & (root < best), root, best)
    return best


def _quad_hits(origin: np.ndarray, dirs: np.ndarray, tag: TagSpec) -> np.ndarray:
    right, up, n = tag.frame()
    c = np.asarray(tag.center, dtype=float)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        root = ((c - origin) @ n) / denom
    p = origin + root[..., None] * dirs - c
    h = tag.side / 2.0
    hit = np.isfinite(root) & (root > 1e-9) & (np.abs(p @ right) <= h) & (np.abs(p @ up) <= h)
    return np.where(hit, root, np.inf)


def _box_hits(o_local: np.ndarray, d_local: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test against an axis-aligned box in local coordinates."""
    t_near = np.full(d_local.shape[:-1], -np.inf)
    t_far = np.full(d_local.shape[:-1], np.inf)
    for axis in range(3):
        d = d_local[..., axis]
        parallel = np.abs(d) < 1e-12
        inside = (o_local[axis] >= lo[axis]) & (o_local[axis] <= hi[axis])
        safe = np.where(parallel, 1.0, d)
        t1 = (lo[axis] - o_local[axis]) / safe
        t2 = (hi[axis] - o_local[axis]) / safe
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = np.maximum(t_near, near)
        t_far = np.minimum(t_far, far)
    hit = (t_far >= t_near) & (t_far > 1e-9)
    entry = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit, entry, np.inf)


def _gate_hits(origin: np.ndarray, dirs: np.ndarray, gate: GateSpec, tag: TagSpec) -> np.ndarray:
    right, up, n = tag.frame()
    basis = np.stack([right, up, n])
    o_local = basis @ (origin - np.asarray(gate.center, dtype=float))
    d_local = dirs @ basis.T
    hw, hh, hd, s = gate.width / 2.0, gate.height / 2.0, gate.depth / 2.0, GATE_BAR
    bars = [
        ((-hw - s, hh, -hd), (hw + s, hh + s, hd)),
        ((-hw - s, -hh - s, -hd), (hw + s, -hh, hd)),
        ((-hw - s, -hh, -hd), (-hw, hh, hd)),
        ((hw, -hh, -hd), (hw + s, hh, hd)),
    ]
    best = np.full(dirs.shape[:-1], np.inf)
    for lo, hi in bars:
        best = np.minimum(best, _box_hits(o_local, d_local, np.array(lo), np.array(hi)))
    return best


def _bounds_exit(origin: np.ndarray, dirs: np.ndarray, scene: WorldScene) -> np.ndarray:
    lo = np.asarray(scene.bounds.min, dtype=float)
    hi = np.asarray(scene.bounds.max, dtype=float)
    if not scene.bounds.contains(origin):
        return np.full(dirs.shape[:-1], np.inf)
    best = np.full(dirs.shape[:-1], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis in range(3):
            d = dirs[..., axis]
            wall = np.where(d > 0, hi[axis], lo[axis])
            root = (wall - origin[axis]) / d
            best = np.where((np.abs(d) > 1e-12) & (root < best), root, best)
    return best


def _segment_blocked(start: np.ndarray, end: np.ndarray, obstacles: Sequence[CylinderObstacle]) -> bool:
    span = end - start
    dist = float(np.linalg.norm(span))
    direction = (span / dist)[None, :]
    for cyl in obstacles:
        root = float(_cylinder_hits(start, direction, cyl)[0])
        if root < dist:
            return True
    return False


def observe_tag(
    cam_pose: CameraPose,
    tag: TagSpec,
    intr: CameraIntrinsics,
    occluders: Sequence[CylinderObstacle] = (),
) -> Optional[TagObservation]:
    """
    Projects the tag's corners, or returns None when the detector would miss it.

    A tag is detected only when its center lies between 0.3 m and 4.0 m, its
    face points back at the camera (within 75 degrees), every corner lands
    inside the image and no cylinder crosses the center line of sight.
    """
    eye = cam_pose.center
    center = np.asarray(tag.center, dtype=float)
    to_tag = center - eye
    rng = float(np.linalg.norm(to_tag))
    if not (MIN_RANGE <= rng <= MAX_RANGE):
        return None
    view = to_tag / rng
    if float(np.asarray(tag.normal) @ view) >= -math.cos(FACING_LIMIT):
        return None
    pixels, z = project_points(cam_pose, tag.corners(), intr)
    if np.any(z <= 0):
        return None
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any(u < 0) or np.any(u >= intr.width) or np.any(v < 0) or np.any(v >= intr.height):
        return None
    if occluders and _segment_blocked(eye, center, occluders):
        return None
    return TagObservation(tag_id=tag.id, corners=pixels, range=rng)


def _pixel_rays(cam_pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """World-frame rays through pixel centers, scaled so the ray parameter is z-depth."""
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    rays_c = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return rays_c @ cam_pose.rotation


def nearness_depth(cam_pose: CameraPose, scene: WorldScene, intr: CameraIntrinsics) -> np.ndarray:
    """Z-depth of the nearest surface per pixel, capped at the far plane."""
    origin = cam_pose.center
    dirs = _pixel_rays(cam_pose, intr)
    z = np.full((intr.height, intr.width), FAR_PLANE)
    for cyl in scene.obstacles:
        z = np.minimum(z, _cylinder_hits(origin, dirs, cyl))
    tags = {t.id: t for t in scene.tags}
    for tag in scene.tags:
        z = np.minimum(z, _quad_hits(origin, dirs, tag))
    for gate in scene.gates:
        z = np.minimum(z, _gate_hits(origin, dirs, gate, tags[gate.tag_id]))
    z = np.minimum(z, _bounds_exit(origin, dirs, scene))
    return z


def render_pseudo_depth(
    cam_pose: CameraPose,
    scene: WorldScene,
    intr: CameraIntrinsics,
    affine: Tuple[float, float] = (1.0, 0.0),
    noise_sigma: float = 0.0,
    rng_seed: int = 0,
    frame_index: int = 0,
) -> DepthMap:
    """
    Renders a pseudo inverse-depth frame in raw units [0, 1023].

    Each pixel holds s * 1000 / z + t + noise, clamped, where z is the z-depth
    of the nearest cylinder, tag, gate bar or arena wall (20 m when nothing is
    hit). Noise comes from a Philox stream keyed by (rng_seed, frame_index)
    and drawn in row-major pixel order, so every frame is reproducible alone.
    """
    s, t = affine
    if s <= 0:
        raise ValueError(f"affine scale must be positive, got {s}")
    if noise_sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {noise_sigma}")
    z = np.maximum(nearness_depth(cam_pose, scene, intr), NEAR_PLANE)
    raw = s * (NEARNESS_K / z) + t
    if noise_sigma > 0:
        seq = np.random.SeedSequence([int(rng_seed), int(frame_index)])
        gen = np.random.Generator(np.random.Philox(seq))
        raw = raw + gen.normal(0.0, noise_sigma, size=raw.size).reshape(raw.shape)
    return DepthMap(width=intr.width, height=intr.height, values=np.clip(raw, 0.0, RAW_MAX))
