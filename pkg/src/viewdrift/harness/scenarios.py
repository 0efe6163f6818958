"""Synthetic scenario templates, the reference bank and the `.scn` file format."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..attack import aff_filter, vaf_filter
from ..errors import InvalidInputError
from ..scene import (
    DEFAULT_DT,
    CameraModel,
    FrameState,
    Pose2,
    ScenarioSequence,
    VehicleSpec,
)

log = logging.getLogger(__name__)

Range = tuple[float, float]


def _check_range(name: str, r: Range, *, allow_point=False) -> None:
    lo, hi = r
    if hi < lo or (hi == lo and not allow_point):
        raise InvalidInputError(f"{name} range {r} is degenerate")


@dataclass(frozen=True)
class ScenarioTemplate:
    """Sampling ranges for one scenario category.

    ``lateral`` is the unsigned lateral offset; its sign follows the L/R part
    of the category (left is +y in the ego frame). When ``closing_speed`` is
    set, the target speed is drawn as ego speed minus that closing speed and
    ``target_speed`` only bounds the result.
    """

    category: str
    ego_speed: Range = (8.0, 14.0)
    target_speed: Range = (5.0, 11.0)
    longitudinal: Range = (10.0, 22.0)
    lateral: Range = (3.0, 3.8)
    direction: str = "same"
    illumination: Range = (0.6, 1.0)
    maneuver: str = "pass-by"
    n_frames: int = 6
    dt: float = DEFAULT_DT
    closing_speed: Range | None = None

    def __post_init__(self):
        parts = self.category.split("-")
        if len(parts) != 3:
            raise InvalidInputError(f"category {self.category!r} is not TYPE-POS-DIR")
        VehicleSpec.of(parts[0])
        if parts[1] not in ("L", "R"):
            raise InvalidInputError("position must be L or R")
        if self.direction not in ("same", "opposite"):
            raise InvalidInputError("direction must be 'same' or 'opposite'")
        if (parts[2] == "S") != (self.direction == "same"):
            raise InvalidInputError("category direction disagrees with the direction field")
        parked = self.maneuver == "parked-target"
        _check_range("ego speed", self.ego_speed)
        _check_range("target speed", self.target_speed, allow_point=parked)
        _check_range("longitudinal", self.longitudinal)
        _check_range("lateral", self.lateral)
        _check_range("illumination", self.illumination, allow_point=True)
        if self.closing_speed is not None:
            _check_range("closing speed", self.closing_speed, allow_point=True)
        if parked and self.target_speed != (0.0, 0.0):
            raise InvalidInputError("parked targets have zero speed")
        if self.lateral[0] < 0 or self.n_frames < 2 or self.dt <= 0:
            raise InvalidInputError("invalid lateral range, frame count or dt")

    @property
    def vehicle(self) -> VehicleSpec:
        return VehicleSpec.of(self.category.split("-")[0])

    @property
    def side(self) -> float:
        return 1.0 if self.category.split("-")[1] == "L" else -1.0


def _u(rng: np.random.Generator, r: Range) -> float:
    return float(r[0]) if r[0] == r[1] else float(rng.uniform(*r))


def build_sequence(spec: VehicleSpec, *, ego_speed: float, target_speed: float, x0: float,
                   y0: float, target_yaw: float, illumination: float, n_frames: int,
                   dt: float = DEFAULT_DT, category: str = "SEDAN-R-S", scenario_id="scenario",
                   maneuver="pass-by", camera: CameraModel | None = None) -> ScenarioSequence:
    """Straight-line kinematics: ego from the origin along +x, target from (x0, y0)."""
    heading = np.array([math.cos(target_yaw), math.sin(target_yaw)])
    frames = []
    for i in range(n_frames):
        t = i * dt
        tx, ty = np.array([x0, y0]) + target_speed * t * heading
        frames.append(FrameState(t, Pose2(ego_speed * t, 0.0, 0.0), ego_speed,
                                 Pose2(float(tx), float(ty), target_yaw), target_speed,
                                 illumination))
    return ScenarioSequence(tuple(frames), spec, camera or CameraModel(), category, scenario_id,
                            maneuver)


def sample_sequence(template: ScenarioTemplate, rng: np.random.Generator,
                    scenario_id: str = "scenario") -> ScenarioSequence:
    ego_v = _u(rng, template.ego_speed)
    if template.closing_speed is None:
        tgt_v = _u(rng, template.target_speed)
    else:
        lo, hi = template.target_speed
        tgt_v = min(hi, max(lo, ego_v - _u(rng, template.closing_speed)))
    yaw = 0.0 if template.direction == "same" else math.pi
    return build_sequence(
        template.vehicle, ego_speed=ego_v, target_speed=tgt_v,
        x0=_u(rng, template.longitudinal), y0=template.side * _u(rng, template.lateral),
        target_yaw=yaw, illumination=_u(rng, template.illumination),
        n_frames=template.n_frames, dt=template.dt, category=template.category,
        scenario_id=scenario_id, maneuver=template.maneuver,
    )


def feasible(seq: ScenarioSequence, k: int = 3, theta_min: float = 0.15) -> bool:
    return aff_filter(seq) and vaf_filter(seq, k, theta_min) is not None


def generate_scenarios(template: ScenarioTemplate, count: int, seed: int, *, k: int = 3,
                       theta_min: float = 0.15, max_attempts: int | None = None,
                       prefix: str | None = None) -> list[ScenarioSequence]:
    """Rejection-sample ``count`` feasible sequences from the template ranges."""
    if count <= 0:
        raise InvalidInputError("count must be positive")
    rng = np.random.default_rng(seed)
    limit = max_attempts or 200 * count
    prefix = prefix or f"{template.category}-s{seed}"
    out: list[ScenarioSequence] = []
    for _ in range(limit):
        seq = sample_sequence(template, rng, f"{prefix}-{len(out):03d}")
        if feasible(seq, k, theta_min):
            out.append(seq)
            if len(out) == count:
                return out
    if not out:
        log.warning("template %s produced no feasible sequence in %d draws", template.category, limit)
        return []
    log.warning("template %s produced only %d/%d feasible sequences", template.category,
                len(out), count)
    return out


def default_template(category: str, **overrides) -> ScenarioTemplate:
    tag, pos, direction = category.split("-")
    if direction == "S":
        base = dict(ego_speed=(9.0, 14.0), target_speed=(2.0, 11.0), closing_speed=(3.0, 7.0),
                    longitudinal=(10.0, 18.0), lateral=(3.0, 3.8), direction="same", n_frames=5)
    else:
        base = dict(ego_speed=(6.0, 10.0), target_speed=(3.0, 7.0), longitudinal=(24.0, 34.0),
                    lateral=(3.2, 4.0), direction="opposite", n_frames=4)
    base.update(overrides)
    return ScenarioTemplate(category, **base)


# per-category counts of the 220-sequence reference bank
BANK_COUNTS = {
    "SUV-R-S": 60, "SEDAN-R-S": 60,
    "SEDAN-L-O": 19, "SEDAN-L-S": 13, "SEDAN-R-O": 14,
    "SUV-L-O": 8, "SUV-L-S": 9, "SUV-R-O": 6,
    "VAN-L-O": 4, "VAN-L-S": 13, "VAN-R-O": 6, "VAN-R-S": 8,
}


def scenario_bank(seed: int = 0) -> list[ScenarioSequence]:
    """The fixed 220-sequence synthetic bank, in category order."""
    out = []
    for i, (cat, n) in enumerate(BANK_COUNTS.items()):
        out.extend(generate_scenarios(default_template(cat), n, seed * 1000 + i,
                                      prefix=f"bank-{cat}"))
    return out


def hard_braking_scenario() -> ScenarioSequence:
    """Ego cruising past a parked van at the right road edge."""
    return build_sequence(VehicleSpec.of("VAN"), ego_speed=11.0, target_speed=0.0, x0=24.0,
                          y0=-3.1, target_yaw=0.0, illumination=0.9, n_frames=4,
                          category="VAN-R-S", scenario_id="canned-hard-braking",
                          maneuver="parked-target")


def abandoned_overtaking_scenario() -> ScenarioSequence:
    """Ego overtaking a slower sedan in the adjacent right lane."""
    return build_sequence(VehicleSpec.of("SEDAN"), ego_speed=13.0, target_speed=8.0, x0=16.0,
                          y0=-3.3, target_yaw=0.0, illumination=0.9, n_frames=4,
                          category="SEDAN-R-S", scenario_id="canned-abandoned-overtaking",
                          maneuver="overtake")


CANNED = {
    "hard-braking": hard_braking_scenario,
    "abandoned-overtaking": abandoned_overtaking_scenario,
}


# ---------------------------------------------------------------------------
# .scn files: "key = value" lines, floats written with repr so reads are exact

_FRAME_FIELDS = ("t", "ego_x", "ego_y", "ego_yaw", "ego_speed", "target_x", "target_y",
                 "target_yaw", "target_speed", "illumination", "target_scale")


def dumps_scenario(seq: ScenarioSequence) -> str:
    cam = seq.camera
    lines = [
        "format = viewdrift-scenario/1",
        f"scenario_id = {seq.scenario_id}",
        f"category = {seq.category}",
        f"maneuver = {seq.maneuver}",
        f"vehicle = {seq.target_spec.type_tag}",
        f"camera.focal = {cam.focal!r}",
        f"camera.principal_point = {cam.principal_point[0]!r} {cam.principal_point[1]!r}",
        f"camera.image_size = {cam.image_size[0]} {cam.image_size[1]}",
        f"camera.mount = {cam.mount.x!r} {cam.mount.y!r} {cam.mount.yaw!r}",
        f"camera.mount_height = {cam.mount_height!r}",
        f"frame_fields = {' '.join(_FRAME_FIELDS)}",
    ]
    for i, f in enumerate(seq.frames):
        vals = (f.t, f.ego.x, f.ego.y, f.ego.yaw, f.ego_speed, f.target.x, f.target.y,
                f.target.yaw, f.target_speed, f.illumination, f.target_scale)
        lines.append(f"frame.{i} = " + " ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def loads_scenario(text: str) -> ScenarioSequence:
    kv = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidInputError(f"line {n}: expected 'key = value'")
        kv[key.strip()] = value.strip()
    if kv.get("format") != "viewdrift-scenario/1":
        raise InvalidInputError("not a viewdrift scenario file")
    fields = kv["frame_fields"].split()
    if tuple(fields) != _FRAME_FIELDS:
        raise InvalidInputError("unsupported frame layout")
    floats = lambda k: [float(v) for v in kv[k].split()]
    mx, my, myaw = floats("camera.mount")
    w, h = (int(v) for v in kv["camera.image_size"].split())
    camera = CameraModel(float(kv["camera.focal"]), tuple(floats("camera.principal_point")),
                         (w, h), Pose2(mx, my, myaw), float(kv["camera.mount_height"]))
    frames = []
    i = 0
    while f"frame.{i}" in kv:
        v = floats(f"frame.{i}")
        frames.append(FrameState(v[0], Pose2(v[1], v[2], v[3]), v[4], Pose2(v[5], v[6], v[7]),
                                 v[8], v[9], v[10]))
        i += 1
    return ScenarioSequence(tuple(frames), VehicleSpec.of(kv["vehicle"]), camera,
                            kv["category"], kv["scenario_id"], kv["maneuver"])


def write_scenario(path, seq: ScenarioSequence) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_scenario(seq), encoding="utf-8")
    return path


def read_scenario(path) -> ScenarioSequence:
    return loads_scenario(Path(path).read_text(encoding="utf-8"))


def with_illumination(seq: ScenarioSequence, level: float) -> ScenarioSequence:
    return replace(seq, frames=tuple(replace(f, illumination=level) for f in seq.frames))
