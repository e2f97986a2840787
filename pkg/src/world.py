"""
Static scene description: AprilTag targets, their gates, cylindrical obstacles
and the arena bounds, plus the TOML scenario format they are loaded from.
"""
import logging
import math
import sys
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

MAX_TAG_SPACING = 4.0  # meters, D435i optimal detection range
UNIT_TOLERANCE = 1e-9
DEFAULT_BOUNDS_EXTENT = 1000.0


class ScenarioError(Exception):
    """Base class for scenario loading failures."""


class ScenarioParseError(ScenarioError):
    """The document is not syntactically valid TOML."""


class ScenarioSemanticError(ScenarioError):
    """The document parses but describes an invalid scene."""


class SearchHint(str, Enum):
    LEFT = "Left"
    RIGHT = "Right"
    UP = "Up"
    DOWN = "Down"
    UNKNOWN = "Unknown"


class TagSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    center: Vec3
    normal: Vec3
    side: float = Field(default=0.3, gt=0)
    search_hint: SearchHint = SearchHint.UNKNOWN

    @field_validator("normal")
    @classmethod
    def _unit_normal(cls, value: Vec3) -> Vec3:
        norm = math.sqrt(sum(c * c for c in value))
        if abs(norm - 1.0) > UNIT_TOLERANCE:
            raise ValueError(f"tag normal must be a unit vector, got |n| = {norm:.12f}")
        return value

    def frame(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Returns (right, up, normal) unit vectors of the tag face as seen by a
        viewer standing in front of it. Up follows world z where possible.
        """
        n = np.asarray(self.normal, dtype=float)
        ref = np.array([0.0, 0.0, 1.0])
        if abs(float(n @ ref)) > 0.99:
            ref = np.array([1.0, 0.0, 0.0])
        up = ref - (ref @ n) * n
        up /= np.linalg.norm(up)
        right = np.cross(-n, up)
        return right, up, n

    def corners(self) -> np.ndarray:
        """
        World coordinates of the 4 corners, counter-clockwise from the
        bottom-left as seen from the front.
        """
        right, up, _ = self.frame()
        c = np.asarray(self.center, dtype=float)
        h = self.side / 2.0
        return np.array([
            c - h * right - h * up,
            c + h * right - h * up,
            c + h * right + h * up,
            c - h * right + h * up,
        ])


class GateSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    tag_id: int
    center: Vec3
    width: float = Field(gt=0)
    height: float = Field(gt=0)
    depth: float = Field(default=0.05, gt=0)
    pass_clearance: float = Field(default=1.5, gt=0)


class CylinderObstacle(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_center: Vec3
    radius: float = Field(gt=0)
    height: float = Field(gt=0)

    def surface_distance(self, point) -> float:
        """Euclidean distance from a point to the closed cylinder (0 inside)."""
        p = np.asarray(point, dtype=float)
        b = np.asarray(self.base_center, dtype=float)
        radial = max(0.0, math.hypot(p[0] - b[0], p[1] - b[1]) - self.radius)
        if p[2] < b[2]:
            vertical = b[2] - p[2]
        elif p[2] > b[2] + self.height:
            vertical = p[2] - b[2] - self.height
        else:
            vertical = 0.0
        return math.hypot(radial, vertical)


class Bounds(BaseModel):
    model_config = ConfigDict(frozen=True)

    min: Vec3 = (-DEFAULT_BOUNDS_EXTENT,) * 3
    max: Vec3 = (DEFAULT_BOUNDS_EXTENT,) * 3

    @model_validator(mode="after")
    def _ordered(self) -> "Bounds":
        if any(lo >= hi for lo, hi in zip(self.min, self.max)):
            raise ValueError(f"bounds min {self.min} must be below max {self.max} on every axis")
        return self

    def contains(self, point) -> bool:
        return all(lo <= c <= hi for lo, c, hi in zip(self.min, point, self.max))


class SpacingWarning(BaseModel):
    from_id: int
    to_id: int
    distance: float

    def __str__(self) -> str:
        return (f"tags {self.from_id} -> {self.to_id} are {self.distance:.3f} m apart "
                f"(detection range is {MAX_TAG_SPACING:.1f} m)")


class WorldScene(BaseModel):
    model_config = ConfigDict(frozen=True)

    tags: List[TagSpec] = Field(min_length=1)
    gates: List[GateSpec] = Field(default_factory=list)
    obstacles: List[CylinderObstacle] = Field(default_factory=list)
    cruise_altitude: float = Field(default=1.0, gt=0)
    bounds: Bounds = Field(default_factory=Bounds)

    @model_validator(mode="after")
    def _consistent(self) -> "WorldScene":
        ids = [t.id for t in self.tags]
        if len(set(ids)) != len(ids):
            raise ValueError(f"tag ids must be unique, got {ids}")
        for gate in self.gates:
            if gate.tag_id not in ids:
                raise ValueError(f"gate references tag_id={gate.tag_id}, which is not in the scene")
        if len({g.tag_id for g in self.gates}) != len(self.gates):
            raise ValueError("at most one gate per tag")
        points = [t.center for t in self.tags] + [g.center for g in self.gates]
        for obstacle in self.obstacles:
            bx, by, bz = obstacle.base_center
            points.append(obstacle.base_center)
            points.append((bx, by, bz + obstacle.height))
        for p in points:
            if not self.bounds.contains(p):
                raise ValueError(f"geometry at {p} lies outside the world bounds")
        return self

    @property
    def n(self) -> int:
        """Index of the destination tag."""
        return len(self.tags) - 1

    def gate_for(self, tag_id: int) -> Optional[GateSpec]:
        for gate in self.gates:
            if gate.tag_id == tag_id:
                return gate
        return None


def _from_document(data: dict) -> WorldScene:
    world = data.get("world", {})
    if not isinstance(world, dict):
        raise ScenarioSemanticError("[world] must be a table")
    payload = {
        "tags": data.get("tag", []),
        "gates": data.get("gate", []),
        "obstacles": data.get("obstacle", []),
    }
    if "cruise_altitude" in world:
        payload["cruise_altitude"] = world["cruise_altitude"]
    if "bounds" in world:
        payload["bounds"] = world["bounds"]
    try:
        return WorldScene.model_validate(payload)
    except ValidationError as e:
        raise ScenarioSemanticError(str(e)) from e


def load_scenario(doc: str) -> WorldScene:
    """
    Parses and validates a scenario document.

    Tags keep their order of appearance, which is the mission order
    id_0 ... id_n. Missing optional fields take their defaults
    (cruise altitude 1.0 m, pass clearance 1.5 m).
    """
    try:
        data = tomllib.loads(doc)
    except tomllib.TOMLDecodeError as e:
        raise ScenarioParseError(f"malformed scenario document: {e}") from e
    return _from_document(data)


def dump_scenario(scene: WorldScene) -> str:
    """Serializes a scene back to the scenario document format."""
    dumped = scene.model_dump(mode="json")
    doc = {
        "world": {
            "cruise_altitude": dumped["cruise_altitude"],
            "bounds": dumped["bounds"],
        },
        "tag": dumped["tags"],
    }
    if dumped["gates"]:
        doc["gate"] = dumped["gates"]
    if dumped["obstacles"]:
        doc["obstacle"] = dumped["obstacles"]
    return tomli_w.dumps(doc)


def bundled_scenarios() -> List[str]:
    folder = resources.files("src") / "scenarios"
    return sorted(p.name[:-len(".toml")] for p in folder.iterdir() if p.name.endswith(".toml"))


def load_scenario_file(source: Union[str, Path]) -> WorldScene:
    """
    Loads a scenario from a path, or by bundled name ("paper_fig3").
    """
    path = Path(source)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        name = str(source)
        if name not in bundled_scenarios():
            raise ScenarioError(f"no scenario file or bundled scenario named {name!r}")
        text = (resources.files("src") / "scenarios" / f"{name}.toml").read_text(encoding="utf-8")
    scene = load_scenario(text)
    logger.debug("[World] Loaded scenario %s: %d tags, %d gates, %d obstacles",
                 source, len(scene.tags), len(scene.gates), len(scene.obstacles))
    return scene


def validate_spacing(scene: WorldScene) -> List[SpacingWarning]:
    """
    One warning per consecutive tag pair whose centers are 4.0 m or more apart.
    """
    warnings = []
    for a, b in zip(scene.tags, scene.tags[1:]):
        distance = math.dist(a.center, b.center)
        if distance >= MAX_TAG_SPACING:
            warnings.append(SpacingWarning(from_id=a.id, to_id=b.id, distance=distance))
    return warnings
