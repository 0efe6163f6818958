"""Ground-plane world model: poses, vehicles, camera geometry and visibility.

Everything lives in a single BEV world frame. Heights only matter for the
camera projection; vehicles sit on the ground so box centers have z = h/2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateGeometryError, InvalidInputError, NotVisibleError

TWO_PI = 2.0 * math.pi
FACES = ("front", "rear", "left", "right")
# outward normals in the vehicle body frame
FACE_NORMALS = {
    "front": (1.0, 0.0),
    "rear": (-1.0, 0.0),
    "left": (0.0, 1.0),
    "right": (0.0, -1.0),
}

DEFAULT_DT = 0.5


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(a, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def heading(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw)])

    def compose(self, other: "Pose2") -> "Pose2":
        """Apply ``other`` expressed in this pose's frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )


@dataclass(frozen=True)
class VehicleSpec:
    length: float
    width: float
    height: float
    type_tag: str

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise InvalidInputError("vehicle dimensions must be positive")
        if self.type_tag not in CATALOGUE_DIMS:
            raise InvalidInputError(f"unknown vehicle type {self.type_tag!r}")
        if (self.length, self.width, self.height) != CATALOGUE_DIMS[self.type_tag]:
            raise InvalidInputError(f"{self.type_tag} dims must match the catalogue")

    @classmethod
    def of(cls, type_tag: str) -> "VehicleSpec":
        tag = type_tag.upper()
        if tag not in CATALOGUE_DIMS:
            raise InvalidInputError(f"unknown vehicle type {type_tag!r}")
        return cls(*CATALOGUE_DIMS[tag], tag)

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.length, self.width, self.height)


CATALOGUE_DIMS = {
    "SUV": (4.6, 1.9, 1.8),
    "SEDAN": (4.7, 1.8, 1.45),
    "VAN": (5.0, 2.0, 2.2),
}


@dataclass(frozen=True)
class Box3:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise InvalidInputError("box dims must be positive")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def on_ground(cls, pose: Pose2, dims, scale: float = 1.0) -> "Box3":
        l, w, h = (scale * d for d in dims)
        return cls((pose.x, pose.y, h / 2.0), (l, w, h), pose.yaw)

    def corners(self) -> np.ndarray:
        """The 8 corners as an (8, 3) array."""
        l, w, h = self.dims
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        xs = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * l / 2
        ys = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * w / 2
        zs = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * h / 2
        cx, cy, cz = self.center
        return np.stack([cx + c * xs - s * ys, cy + s * xs + c * ys, cz + zs], axis=1)


@dataclass(frozen=True)
class DetectionBox:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float
    confidence: float = 1.0

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise InvalidInputError("box dims must be positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError("confidence must lie in [0, 1]")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "confidence", float(self.confidence))

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.center[:2])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera rigidly mounted on the ego vehicle."""

    focal: float = 1266.0
    principal_point: tuple[float, float] = (800.0, 450.0)
    image_size: tuple[int, int] = (1600, 900)
    mount: Pose2 = field(default_factory=lambda: Pose2(1.5, 0.0, 0.0))
    mount_height: float = 1.5

    def __post_init__(self):
        if self.focal <= 0:
            raise InvalidInputError("focal length must be positive")
        u, v = self.principal_point
        w, h = self.image_size
        if not (0 <= u <= w and 0 <= v <= h):
            raise InvalidInputError("principal point must lie inside the image")

    def world_pose(self, ego: Pose2) -> Pose2:
        return ego.compose(self.mount)

    def to_camera(self, points: np.ndarray, ego: Pose2) -> np.ndarray:
        """World points (N, 3) -> (forward, left, up) camera coordinates."""
        cam = self.world_pose(ego)
        c, s = math.cos(cam.yaw), math.sin(cam.yaw)
        dx = points[:, 0] - cam.x
        dy = points[:, 1] - cam.y
        return np.stack(
            [c * dx + s * dy, -s * dx + c * dy, points[:, 2] - self.mount_height], axis=1
        )

    def project(self, points: np.ndarray, ego: Pose2) -> np.ndarray:
        """Project world points to pixels. Points must be in front of the camera."""
        pc = self.to_camera(points, ego)
        if np.any(pc[:, 0] <= 1e-3):
            raise NotVisibleError("point behind the camera plane")
        u = self.principal_point[0] - self.focal * pc[:, 1] / pc[:, 0]
        v = self.principal_point[1] - self.focal * pc[:, 2] / pc[:, 0]
        return np.stack([u, v], axis=1)


@dataclass(frozen=True)
class FrameState:
    t: float
    ego: Pose2
    ego_speed: float
    target: Pose2
    target_speed: float
    illumination: float = 1.0
    target_scale: float = 1.0

    def __post_init__(self):
        if self.ego_speed < 0 or self.target_speed < 0:
            raise InvalidInputError("speeds must be non-negative")
        if not 0 < self.illumination <= 1:
            raise InvalidInputError("illumination must lie in (0, 1]")
        if self.target_scale <= 0:
            raise InvalidInputError("target scale must be positive")

    @property
    def ego_velocity(self) -> np.ndarray:
        return self.ego_speed * self.ego.heading

    @property
    def target_velocity(self) -> np.ndarray:
        return self.target_speed * self.target.heading

    @property
    def relative_speed(self) -> float:
        return float(np.linalg.norm(self.target_velocity - self.ego_velocity))


@dataclass(frozen=True)
class ScenarioSequence:
    """Synchronised frames of one ego/target encounter.

    Attack windows hold exactly K frames; the longer original sequences a
    window is cut from use the same type.
    """

    frames: tuple[FrameState, ...]
    target_spec: VehicleSpec
    camera: CameraModel = field(default_factory=CameraModel)
    category: str = "SEDAN-R-S"
    scenario_id: str = "scenario"
    maneuver: str = "pass-by"

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) < 2:
            raise InvalidInputError("a sequence needs at least two frames")
        ts = np.array([f.t for f in frames])
        steps = np.diff(ts)
        if np.any(steps <= 0):
            raise InvalidInputError("frame timestamps must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=0, atol=1e-9):
            raise InvalidInputError("frames must be uniformly spaced in time")
        parts = self.category.split("-")
        if len(parts) != 3 or parts[1] not in ("L", "R") or parts[2] not in ("S", "O"):
            raise InvalidInputError(f"category {self.category!r} is not TYPE-POS-DIR")
        if self.maneuver not in ("pass-by", "overtake", "parked-target"):
            raise InvalidInputError(f"unknown maneuver {self.maneuver!r}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def dt(self) -> float:
        return self.frames[1].t - self.frames[0].t

    def window(self, start: int, k: int) -> "ScenarioSequence":
        return replace(self, frames=self.frames[start:start + k])


def viewing_angle(ego: Pose2, target: Pose2) -> float:
    """Aspect angle: target heading relative to the observer-to-target ray."""
    dx, dy = target.x - ego.x, target.y - ego.y
    if math.hypot(dx, dy) < 1e-9:
        raise DegenerateGeometryError("observer and target positions coincide")
    return wrap_angle(target.yaw - math.atan2(dy, dx))


def viewing_angle_variation(seq: ScenarioSequence) -> float:
    if len(seq) < 2:
        raise InvalidInputError("need at least two frames")
    first = _observed_angle(seq, seq.frames[0])
    last = _observed_angle(seq, seq.frames[-1])
    return abs(wrap_angle(last - first))


def _observed_angle(seq: ScenarioSequence, frame: FrameState) -> float:
    return viewing_angle(seq.camera.world_pose(frame.ego), frame.target)


def face_visibility(ego: Pose2, target: Pose2, target_spec: VehicleSpec,
                    scale: float = 1.0) -> np.ndarray:
    """Back-face-culled cosine weights for (front, rear, left, right).

    Each weight is the cosine between the outward face normal and the ray from
    the face center to the observer, clipped at zero.
    """
    if math.hypot(target.x - ego.x, target.y - ego.y) < 1e-9:
        raise DegenerateGeometryError("observer and target positions coincide")
    half = {"front": target_spec.length / 2, "rear": target_spec.length / 2,
            "left": target_spec.width / 2, "right": target_spec.width / 2}
    c, s = math.cos(target.yaw), math.sin(target.yaw)
    out = np.zeros(4)
    for i, face in enumerate(FACES):
        nx_b, ny_b = FACE_NORMALS[face]
        nx, ny = c * nx_b - s * ny_b, s * nx_b + c * ny_b
        fx = target.x + nx * half[face] * scale
        fy = target.y + ny * half[face] * scale
        rx, ry = ego.x - fx, ego.y - fy
        norm = math.hypot(rx, ry)
        if norm < 1e-12:
            continue
        out[i] = max(0.0, (nx * rx + ny * ry) / norm)
    return out


def projected_area(camera: CameraModel, box: Box3, ego: Pose2) -> float:
    """Image-plane area (px^2) of the convex hull of the projected box corners."""
    pix = camera.project(box.corners(), ego)
    try:
        return float(ConvexHull(pix).volume)
    except QhullError:
        return 0.0


def in_frustum(camera: CameraModel, point: np.ndarray, ego: Pose2) -> bool:
    pc = camera.to_camera(np.atleast_2d(point), ego)[0]
    if pc[0] <= 1e-3:
        return False
    u = camera.principal_point[0] - camera.focal * pc[1] / pc[0]
    return 0.0 <= u <= camera.image_size[0]


def target_box(frame: FrameState, spec: VehicleSpec) -> Box3:
    return Box3.on_ground(frame.target, spec.dims, frame.target_scale)


def clean_detection(frame: FrameState, spec: VehicleSpec) -> "DetectionBox":
    """Ground-truth passthrough; the surrogate is exact on clean input."""
    box = target_box(frame, spec)
    return DetectionBox(box.center, box.dims, box.yaw, 1.0)
