"""Scenario filters, planning-guided target search, losses and texture optimization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .downstream import (
    PIPELINE_A,
    PipelineParams,
    Trajectory,
    clean_detections,
    ego_path,
    fake_detections,
    planning_error,
    run_pipeline,
)
from .errors import DegenerateGroupError, InvalidInputError
from .geometry import project_onto_polyline
from .scene import (
    CameraModel,
    DetectionBox,
    ScenarioSequence,
    VehicleSpec,
    clean_detection,
    in_frustum,
    viewing_angle_variation,
    wrap_angle,
)
from .surrogate import (
    EotRanges,
    EotSample,
    FaceAtlas,
    IDENTITY_SAMPLE,
    SurrogateDetector,
    apply_deltas,
    apply_eot,
    new_texture,
    outputs_to_deltas_vjp,
    sample_eot,
    view_context,
)

log = logging.getLogger(__name__)

DEFAULT_DIRECTIONS = tuple(
    (math.cos(i * math.pi / 8), math.sin(i * math.pi / 8)) for i in range(16)
)
DEFAULT_STEPS = (0.1, 0.2, 0.3, 0.4, 0.5)
FIDELITY_SCALES = np.array([1.0, 1.0, 1.0, 1.0, 0.5])  # conf, l, w, h, yaw

# 12 saturated printable colours plus black, white and mid gray
DEFAULT_PALETTE = (
    (0.80, 0.10, 0.10), (0.90, 0.45, 0.10), (0.95, 0.80, 0.15), (0.55, 0.75, 0.15),
    (0.10, 0.60, 0.20), (0.10, 0.60, 0.55), (0.10, 0.55, 0.80), (0.15, 0.25, 0.70),
    (0.40, 0.20, 0.65), (0.70, 0.20, 0.60), (0.85, 0.35, 0.50), (0.50, 0.30, 0.15),
    (0.05, 0.05, 0.05), (0.95, 0.95, 0.95), (0.50, 0.50, 0.50),
)


@dataclass(frozen=True)
class AttackTarget:
    u: tuple[float, float]
    s: float

    def __post_init__(self):
        u = tuple(float(v) for v in self.u)
        object.__setattr__(self, "u", u)
        if abs(math.hypot(*u) - 1.0) > 1e-9:
            raise InvalidInputError("attack direction must be a unit vector")
        if self.s <= 0:
            raise InvalidInputError("step size must be positive")

    @property
    def direction(self) -> np.ndarray:
        return np.array(self.u)

    def flipped(self) -> "AttackTarget":
        return AttackTarget((-self.u[0], -self.u[1]), self.s)


@dataclass(frozen=True)
class LossWeights:
    move: float = 1.0
    prog: float = 1.0
    fid: float = 0.5
    tv: float = 0.1
    nps: float = 0.05

    def __post_init__(self):
        if min(self.move, self.prog, self.fid, self.tv, self.nps) < 0:
            raise InvalidInputError("loss weights must be non-negative")


@dataclass(frozen=True)
class FidelityVector:
    confidence: float
    length: float
    width: float
    height: float
    yaw: float

    @classmethod
    def of(cls, box: DetectionBox) -> "FidelityVector":
        return cls(box.confidence, *box.dims, box.yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.confidence, self.length, self.width, self.height, self.yaw])


@dataclass(frozen=True)
class Palette:
    colors: tuple

    def __post_init__(self):
        arr = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if len(arr) == 0:
            raise InvalidInputError("palette must not be empty")
        object.__setattr__(self, "colors", tuple(map(tuple, arr)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=float)


# ---------------------------------------------------------------------------
# scenario filters


def aff_filter(candidate: ScenarioSequence, ego_future_path: Trajectory | None = None, *,
               band: float = 6.0, margin: float = 1.0, ego_width: float = 1.9,
               horizon: float = 3.0) -> bool:
    """Attack feasibility: visible, ahead, path-relevant and not already intruding."""
    return not aff_violations(candidate, ego_future_path, band=band, margin=margin,
                              ego_width=ego_width, horizon=horizon)


def aff_violations(candidate: ScenarioSequence, ego_future_path: Trajectory | None = None, *,
                   band: float = 6.0, margin: float = 1.0, ego_width: float = 1.9,
                   horizon: float = 3.0) -> list[str]:
    """Names of the violated feasibility conditions (empty when feasible)."""
    frames = candidate.frames
    spec = candidate.target_spec
    if ego_future_path is None:
        span = horizon + candidate.dt * len(frames)
        ego_future_path = ego_path(frames[0], span, candidate.dt)
    out = []
    centers = np.array([[f.target.x, f.target.y, spec.height / 2] for f in frames])
    if not all(in_frustum(candidate.camera, c, f.ego) for c, f in zip(centers, frames)):
        out.append("visible")
    ahead = [
        (f.target.xy - f.ego.xy) @ f.ego.heading > 0.0 for f in frames
    ]
    if not all(ahead):
        out.append("ahead")
    pos = centers[:, :2]
    dist, _, _ = project_onto_polyline(pos, ego_future_path.points)
    if np.any(dist > band):
        out.append("relevant")
    last = frames[-1]
    t = np.arange(1, int(round(horizon / candidate.dt)) + 1) * candidate.dt
    future = last.target.xy + t[:, None] * last.target_velocity
    dist_all, _, _ = project_onto_polyline(np.vstack([pos, future]), ego_future_path.points)
    clearance = dist_all - 0.5 * (spec.width + ego_width)
    if np.any(clearance < margin):
        out.append("intruding")
    return out


def vaf_filter(candidate: ScenarioSequence, k: int = 3,
               theta_min: float = 0.15) -> ScenarioSequence | None:
    """The K-frame window with the largest viewing-angle variation, if large enough."""
    if theta_min <= 0:
        raise InvalidInputError("theta_min must be positive")
    if len(candidate) < k:
        raise InvalidInputError(f"sequence has {len(candidate)} frames, need {k}")
    variations = [viewing_angle_variation(candidate.window(i, k))
                  for i in range(len(candidate) - k + 1)]
    best = int(np.argmax(variations))
    if variations[best] < theta_min:
        return None
    return candidate.window(best, k)


# ---------------------------------------------------------------------------
# target search


def plan_error_grid(seq: ScenarioSequence, directions=DEFAULT_DIRECTIONS, steps=DEFAULT_STEPS,
                    pipeline: PipelineParams = PIPELINE_A, w_mtd: float = 0.5) -> np.ndarray:
    """E_plan for every (step, direction) pair, shape (len(steps), len(directions))."""
    clean = clean_detections(seq)
    base = run_pipeline(seq, clean, pipeline).plan
    grid = np.empty((len(steps), len(directions)))
    for i, s in enumerate(steps):
        for j, u in enumerate(directions):
            fake = run_pipeline(seq, fake_detections(clean, u, s), pipeline).plan
            grid[i, j] = planning_error(base, fake, w_mtd)
    return grid


def search_target(seq: ScenarioSequence, directions=DEFAULT_DIRECTIONS, steps=DEFAULT_STEPS,
                  pipeline: PipelineParams = PIPELINE_A, w_mtd: float = 0.5) -> AttackTarget:
    """Exhaustive argmax of the planning error; ties go to smaller s, then earlier u."""
    if not directions or not steps:
        raise InvalidInputError("direction and step sets must be non-empty")
    if any(s <= 0 for s in steps):
        raise InvalidInputError("steps must be positive")
    grid = plan_error_grid(seq, directions, steps, pipeline, w_mtd)
    best = None
    for i in sorted(range(len(steps)), key=lambda i: steps[i]):
        for j in range(len(directions)):
            if best is None or grid[i, j] > grid[best]:
                best = (i, j)
    u = np.asarray(directions[best[1]], dtype=float)
    return AttackTarget(tuple(u / np.linalg.norm(u)), steps[best[0]])


def group_target(targets: Sequence[AttackTarget]) -> AttackTarget:
    if not targets:
        raise InvalidInputError("need at least one target")
    if len(targets) == 1:
        return targets[0]
    mean_u = np.mean([t.direction for t in targets], axis=0)
    norm = float(np.linalg.norm(mean_u))
    if norm < 1e-6:
        raise DegenerateGroupError("group attack directions cancel out")
    return AttackTarget(tuple(mean_u / norm), float(np.mean([t.s for t in targets])))


# ---------------------------------------------------------------------------
# losses


def displacement(clean_center, attacked_center, u_bar) -> float:
    u = np.asarray(u_bar, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9:
        raise InvalidInputError("u_bar must be a unit vector")
    diff = np.asarray(attacked_center, dtype=float)[:2] - np.asarray(clean_center, dtype=float)[:2]
    return float(diff @ u)


def loss_move(d) -> float:
    return -float(np.sum(d))


def loss_prog(d, s_bar: float) -> float:
    d = np.asarray(d, dtype=float)
    if len(d) < 2:
        raise InvalidInputError("need at least two displacements")
    e = np.diff(d) - s_bar
    return float(e @ e)


def loss_prog_grad(d, s_bar: float) -> np.ndarray:
    e = np.diff(np.asarray(d, dtype=float)) - s_bar
    g = np.zeros(len(d))
    g[1:] += 2 * e
    g[:-1] -= 2 * e
    return g


def _fidelity_error(r_hat: FidelityVector, r: FidelityVector, scales) -> np.ndarray:
    diff = r_hat.as_array() - r.as_array()
    diff[4] = wrap_angle(diff[4])
    return diff / np.asarray(scales, dtype=float)


def loss_fid(r_hat: FidelityVector, r: FidelityVector, scales=FIDELITY_SCALES) -> float:
    """Scaled L2 distance over (confidence, length, width, height, yaw)."""
    if np.any(np.asarray(scales) <= 0):
        raise InvalidInputError("fidelity scales must be positive")
    return float(np.linalg.norm(_fidelity_error(r_hat, r, scales)))


def loss_tv(texture: np.ndarray) -> float:
    dh = texture[:, 1:] - texture[:, :-1]
    dv = texture[1:, :] - texture[:-1, :]
    return (float(np.mean(dh * dh)) if dh.size else 0.0) + (float(np.mean(dv * dv)) if dv.size else 0.0)


def loss_tv_grad(texture: np.ndarray) -> np.ndarray:
    g = np.zeros_like(texture)
    dh = texture[:, 1:] - texture[:, :-1]
    dv = texture[1:, :] - texture[:-1, :]
    if dh.size:
        gh = 2.0 * dh / dh.size
        g[:, 1:] += gh
        g[:, :-1] -= gh
    if dv.size:
        gv = 2.0 * dv / dv.size
        g[1:, :] += gv
        g[:-1, :] -= gv
    return g


def _nearest_palette(texture: np.ndarray, palette: Palette):
    pix = texture.reshape(-1, 3)
    colors = palette.array
    d2 = (pix * pix).sum(axis=1)[:, None] - 2.0 * pix @ colors.T + (colors * colors).sum(axis=1)
    idx = np.argmin(d2, axis=1)
    diff = pix - colors[idx]
    return diff, np.sqrt((diff * diff).sum(axis=1))


def loss_nps(texture: np.ndarray, palette: Palette = Palette(DEFAULT_PALETTE)) -> float:
    """Mean distance from each pixel to its nearest printable colour."""
    _, dist = _nearest_palette(texture, palette)
    return float(dist.mean())


def nps_value_and_grad(texture: np.ndarray, palette: Palette = Palette(DEFAULT_PALETTE)):
    diff, dist = _nearest_palette(texture, palette)
    safe = np.where(dist > 0, dist, 1.0)
    g = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0) / len(dist)
    return float(dist.mean()), g.reshape(texture.shape)


def loss_nps_grad(texture: np.ndarray, palette: Palette = Palette(DEFAULT_PALETTE)) -> np.ndarray:
    return nps_value_and_grad(texture, palette)[1]


TERMS = ("move", "prog", "fid", "tv", "nps")


@dataclass
class LossComponents:
    """Per-term loss values and their texture gradients for one evaluation.

    Detector-path terms keep their gradient in pooled-statistic space until
    :meth:`gradient` pulls the weighted sum back to pixels in one pass.
    """

    values: dict
    raw_grads: dict
    pixel_grads: dict
    pullback: Callable[[np.ndarray], np.ndarray]
    displacements: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boxes: list = field(default_factory=list)
    clean_boxes: list = field(default_factory=list)

    def gradient(self, weights: LossWeights) -> np.ndarray:
        raw = sum(getattr(weights, k) * self.raw_grads[k] for k in self.raw_grads)
        grad = self.pullback(raw)
        for k, g in self.pixel_grads.items():
            w = getattr(weights, k)
            if w:
                grad = grad + w * g
        return grad

    def __add__(self, other: "LossComponents") -> "LossComponents":
        values = {k: self.values[k] + other.values[k] for k in self.values}

        def pull(raw, a=self, b=other):
            return a.pullback(raw) if a is not None else b.pullback(raw)

        raw = {k: self.raw_grads[k] + other.raw_grads[k] for k in self.raw_grads}
        pix = {k: self.pixel_grads[k] + other.pixel_grads[k] for k in self.pixel_grads}
        return LossComponents(values, raw, pix, pull)


def total_loss(components: LossComponents, weights: LossWeights):
    """Weighted objective value and its gradient w.r.t. the texture."""
    value = sum(getattr(weights, k) * components.values[k] for k in TERMS)
    return float(value), components.gradient(weights)


# ---------------------------------------------------------------------------
# per-scenario objective


@dataclass
class AttackProblem:
    """One K-frame scenario as seen by a given detector and atlas."""

    seq: ScenarioSequence
    detector: SurrogateDetector
    atlas: FaceAtlas
    palette: Palette = field(default_factory=lambda: Palette(DEFAULT_PALETTE))

    @classmethod
    def build(cls, seq: ScenarioSequence, detector: SurrogateDetector,
              resolution=64, palette: Palette | None = None) -> "AttackProblem":
        atlas = FaceAtlas.for_vehicle(seq.target_spec, resolution)
        return cls(seq, detector, atlas, palette or Palette(DEFAULT_PALETTE))

    def frames(self, sample: EotSample = IDENTITY_SAMPLE):
        return [apply_eot(f, sample, self.seq.camera) for f in self.seq.frames]

    def forward(self, texture: np.ndarray, sample: EotSample = IDENTITY_SAMPLE):
        """Clean boxes, attacked boxes and per-frame caches."""
        spec, cam, det = self.seq.target_spec, self.seq.camera, self.detector
        raw = self.atlas.raw_stats(texture)
        out = []
        for frame in self.frames(sample):
            ctx = view_context(frame, spec, cam, det)
            scales = ctx.scales()
            deltas, cache = det.respond(scales * raw)
            clean = clean_detection(frame, spec)
            out.append((clean, apply_deltas(clean, deltas, ctx.heading), deltas, cache, scales, ctx))
        return out

    def attacked_boxes(self, texture: np.ndarray, sample: EotSample = IDENTITY_SAMPLE):
        return [(c, a) for c, a, *_ in self.forward(texture, sample)]

    def components(self, texture: np.ndarray, target: AttackTarget,
                   sample: EotSample = IDENTITY_SAMPLE, need_pixel_terms: bool = True) -> LossComponents:
        u = target.direction
        frames = self.forward(texture, sample)
        d = np.array([displacement(c.center, a.center, u) for c, a, *_ in frames])
        g_prog = loss_prog_grad(d, target.s)
        raw_move = np.zeros(len(frames[0][4]))
        raw_prog = np.zeros_like(raw_move)
        raw_fid = np.zeros_like(raw_move)
        fid_total = 0.0
        for k, (clean, box, deltas, cache, scales, ctx) in enumerate(frames):
            g_out = np.zeros(7)
            g_out[0:2] = u
            g_raw_d = scales * self.detector.respond_vjp(
                cache, outputs_to_deltas_vjp(clean, deltas, g_out, ctx.heading))
            raw_move -= g_raw_d
            raw_prog += g_prog[k] * g_raw_d
            err = _fidelity_error(FidelityVector.of(box), FidelityVector.of(clean), FIDELITY_SCALES)
            norm = float(np.linalg.norm(err))
            fid_total += norm
            if norm > 0:
                g_r = err / norm / FIDELITY_SCALES
                g_out = np.zeros(7)
                g_out[6] = g_r[0]
                g_out[3:6] = g_r[1:4]
                g_out[2] = g_r[4]
                raw_fid += scales * self.detector.respond_vjp(
                    cache, outputs_to_deltas_vjp(clean, deltas, g_out, ctx.heading))
        values = {"move": loss_move(d), "prog": loss_prog(d, target.s), "fid": fid_total}
        pixel = {}
        if need_pixel_terms:
            values["tv"] = loss_tv(texture)
            values["nps"], pixel["nps"] = nps_value_and_grad(texture, self.palette)
            pixel["tv"] = loss_tv_grad(texture)
        return LossComponents(
            values,
            {"move": raw_move, "prog": raw_prog, "fid": raw_fid},
            pixel,
            lambda raw: self.atlas.raw_stats_vjp(texture, raw),
            d,
            [f[1] for f in frames],
            [f[0] for f in frames],
        )

    def loss(self, texture, target, weights: LossWeights, sample: EotSample = IDENTITY_SAMPLE):
        return total_loss(self.components(texture, target, sample), weights)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    texture: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def start(cls, texture: np.ndarray, lr: float = 0.01, seed: int = 0) -> "OptimizerState":
        return cls(texture.copy(), np.zeros_like(texture), np.zeros_like(texture), 0, lr, seed)

    def update(self, grad: np.ndarray) -> None:
        """One bias-corrected Adam step followed by projection onto [0, 1]."""
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.step)
        v_hat = self.v / (1 - self.beta2 ** self.step)
        self.texture = np.clip(self.texture - self.lr * m_hat / (np.sqrt(v_hat) + self.eps), 0.0, 1.0)


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 500
    lr: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    eot: EotRanges = field(default_factory=EotRanges)
    use_eot: bool = True
    eot_samples: int = 1
    seed: int = 0
    resolution: int = 64
    init_noise: float = 0.05


@dataclass
class OptimizeResult:
    texture: np.ndarray
    trace: list
    state: OptimizerState


def optimize(problems: Sequence[AttackProblem], target: AttackTarget,
             config: AttackConfig = AttackConfig(), texture: np.ndarray | None = None) -> OptimizeResult:
    """Adam on one texture shared by every scenario in the group.

    Each step draws fresh EoT samples per scenario from an rng keyed by
    (seed, step, scenario index), so the result does not depend on the order
    in which scenario gradients are accumulated.
    """
    if not problems:
        raise InvalidInputError("training group is empty")
    if texture is None:
        texture = new_texture(config.resolution, np.random.default_rng(config.seed), config.init_noise)
    state = OptimizerState.start(texture, config.lr, config.seed)
    w = config.weights
    trace = []
    n = len(problems)
    for step in range(config.steps):
        grad = np.zeros_like(state.texture)
        acc = dict.fromkeys(TERMS, 0.0)
        for i, prob in enumerate(problems):
            rng = np.random.default_rng([config.seed, step, i])
            for _ in range(config.eot_samples):
                sample = sample_eot(config.eot, rng) if config.use_eot else IDENTITY_SAMPLE
                comp = prob.components(state.texture, target, sample, need_pixel_terms=False)
                grad += comp.gradient(w) / config.eot_samples
                for k in ("move", "prog", "fid"):
                    acc[k] += comp.values[k] / config.eot_samples
        # style terms depend on the texture alone
        acc["tv"] = n * loss_tv(state.texture)
        nps, g_nps = nps_value_and_grad(state.texture, problems[0].palette)
        acc["nps"] = n * nps
        if w.tv:
            grad += n * w.tv * loss_tv_grad(state.texture)
        if w.nps:
            grad += n * w.nps * g_nps
        row = {k: acc[k] / n for k in TERMS}
        row["total"] = sum(getattr(w, k) * row[k] for k in TERMS)
        row["step"] = step
        trace.append(row)
        state.update(grad / n)
    final = state.texture.astype(np.float32).astype(np.float64)
    return OptimizeResult(final, trace, state)
