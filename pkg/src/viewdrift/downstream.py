"""Victim temporal pipeline: Kalman tracker, constant-velocity predictor, planner."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NumericalFailureError
from .geometry import project_onto_polyline
from .scene import DetectionBox, FrameState, Pose2, ScenarioSequence, clean_detection, wrap_angle

HARD_BRAKE_THRESHOLD = 3.0


@dataclass(frozen=True)
class TrackerParams:
    accel_sigma: float = 2.0       # m/s^2, white-noise acceleration
    yaw_accel_sigma: float = 0.5   # rad/s^2
    pos_sigma: float = 0.1         # m, measurement noise
    yaw_sigma: float = 0.05        # rad
    prior_pos_var: float = 0.1
    prior_yaw_var: float = 0.01
    prior_vel_var: float = 25.0
    prior_yaw_rate_var: float = 0.25
    gate: float = 30.0             # Mahalanobis^2 gate; larger innovations are ignored


@dataclass
class TrackState:
    mean: np.ndarray
    covariance: np.ndarray
    age: int = 1
    hits: int = 1
    dims: tuple[float, float, float] = (4.7, 1.8, 1.45)

    @property
    def position(self) -> np.ndarray:
        return self.mean[0:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[3:5]


def _transition(dt: float) -> np.ndarray:
    f = np.eye(6)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    return f


def _process_noise(dt: float, p: TrackerParams) -> np.ndarray:
    q = np.zeros((6, 6))
    block = np.array([[dt ** 4 / 4, dt ** 3 / 2], [dt ** 3 / 2, dt ** 2]])
    for axis, sigma in ((0, p.accel_sigma), (1, p.accel_sigma), (2, p.yaw_accel_sigma)):
        idx = np.ix_([axis, axis + 3], [axis, axis + 3])
        q[idx] = sigma ** 2 * block
    return q


_H = np.zeros((3, 6))
_H[0, 0] = _H[1, 1] = _H[2, 2] = 1.0


def track_update(state: TrackState | None, detection: DetectionBox | None, dt: float,
                 params: TrackerParams = TrackerParams()) -> TrackState:
    """Constant-velocity Kalman predict-then-update.

    A missing detection (``None``) or one outside the gate only advances the
    prediction.
    """
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    if state is None:
        if detection is None:
            raise InvalidInputError("cannot start a track without a detection")
        mean = np.array([detection.center[0], detection.center[1], detection.yaw, 0.0, 0.0, 0.0])
        cov = np.diag([params.prior_pos_var, params.prior_pos_var, params.prior_yaw_var,
                       params.prior_vel_var, params.prior_vel_var, params.prior_yaw_rate_var])
        return TrackState(mean, cov, 1, 1, detection.dims)

    f = _transition(dt)
    mean = f @ state.mean
    mean[2] = wrap_angle(mean[2])
    cov = f @ state.covariance @ f.T + _process_noise(dt, params)
    hits, dims = state.hits, state.dims
    if detection is not None:
        r = np.diag([params.pos_sigma ** 2, params.pos_sigma ** 2, params.yaw_sigma ** 2])
        innov = np.array([detection.center[0] - mean[0], detection.center[1] - mean[1],
                          wrap_angle(detection.yaw - mean[2])])
        s = _H @ cov @ _H.T + r
        if innov @ np.linalg.solve(s, innov) <= params.gate:
            k = cov @ _H.T @ np.linalg.inv(s)
            mean = mean + k @ innov
            mean[2] = wrap_angle(mean[2])
            i_kh = np.eye(6) - k @ _H
            cov = i_kh @ cov @ i_kh.T + k @ r @ k.T  # Joseph form
            hits += 1
            dims = detection.dims
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("track covariance lost positive definiteness") from exc
    return TrackState(mean, cov, state.age + 1, hits, dims)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(times) != len(points):
            raise InvalidInputError("times and points differ in length")
        if len(times) > 1:
            steps = np.diff(times)
            if np.any(steps <= 0) or not np.allclose(steps, steps[0], atol=1e-9):
                raise InvalidInputError("trajectory timestamps must be uniform and increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self.times) else 0.0


def _steps(horizon: float, dt: float) -> np.ndarray:
    n = int(round(horizon / dt))
    return np.arange(n + 1) * dt


def predict_trajectory(state: TrackState, horizon: float, dt: float) -> Trajectory:
    """Extrapolate the track's position with its velocity estimate."""
    if dt <= 0 or horizon < dt:
        raise InvalidInputError("need horizon >= dt > 0")
    t = _steps(horizon, dt)
    return Trajectory(t, state.position[None, :] + t[:, None] * state.velocity[None, :])


def ego_path(frame: FrameState, horizon: float, dt: float, min_length: float = 5.0) -> Trajectory:
    """Straight reference path along the ego heading at the current speed."""
    t = _steps(horizon, dt)
    speed = max(frame.ego_speed, min_length / horizon)
    return Trajectory(t, frame.ego.xy[None, :] + speed * t[:, None] * frame.ego.heading[None, :])


@dataclass(frozen=True)
class PlannerParams:
    safety_margin: float = 1.0
    horizon: float = 3.0
    dt: float = 0.25
    hard_brake_threshold: float = HARD_BRAKE_THRESHOLD
    v_safe: float = 0.0
    corridor_margin: float = 1.4
    ego_width: float = 1.9
    min_conflict_distance: float = 1.0


@dataclass(frozen=True)
class Plan:
    ego_path: Trajectory
    speed_profile: np.ndarray
    decel_profile: np.ndarray
    hard_brake: bool
    overtake_abandoned: bool = False
    min_distance: float = math.inf
    threshold: float = HARD_BRAKE_THRESHOLD

    def __post_init__(self):
        decel = np.asarray(self.decel_profile, dtype=float)
        if np.any(decel < 0):
            raise InvalidInputError("deceleration values must be non-negative")
        object.__setattr__(self, "decel_profile", decel)
        object.__setattr__(self, "speed_profile", np.asarray(self.speed_profile, dtype=float))
        assert self.hard_brake == (len(decel) > 0 and decel.max() >= self.threshold)

    @property
    def max_decel(self) -> float:
        return float(self.decel_profile.max()) if len(self.decel_profile) else 0.0


def plan(ego: FrameState, path: Trajectory, prediction: Trajectory,
         params: PlannerParams = PlannerParams(), *, target_width: float = 1.8,
         overtaking: bool = False) -> Plan:
    """Clearance-based braking planner.

    At every prediction step the target footprint's lateral clearance to the
    ego path is checked; below the safety margin the ego must stop (or slow to
    ``v_safe``) before the conflict point: decel = (v^2 - v_safe^2) / (2 d).
    """
    if len(prediction) == 0:
        raise InvalidInputError("empty prediction")
    if len(prediction) > 1 and len(path) > 1 and abs(prediction.dt - path.dt) > 1e-9:
        raise InvalidInputError("prediction and ego path must share dt")
    dist, arclen, interior = project_onto_polyline(prediction.points, path.points)
    clearance = dist - 0.5 * (target_width + params.ego_width)
    conflict = interior & (clearance < params.safety_margin)
    v = ego.ego_speed
    need = max(0.0, v * v - params.v_safe ** 2)
    d = np.maximum(arclen, params.min_conflict_distance)
    decel = np.where(conflict, need / (2.0 * d), 0.0)
    peak = float(decel.max())
    speeds = np.maximum(0.0, v - peak * prediction.times)
    abandoned = bool(overtaking and np.any(interior & (clearance < params.corridor_margin)))
    return Plan(path, speeds, decel, peak >= params.hard_brake_threshold, abandoned,
                float(dist.min()), params.hard_brake_threshold)


def planning_error(clean_plan: Plan, attacked_plan: Plan, w_mtd: float = 0.5) -> float:
    """Extra peak braking plus weighted loss of path clearance."""
    loss = max(0.0, clean_plan.min_distance - attacked_plan.min_distance)
    return (attacked_plan.max_decel - clean_plan.max_decel) + w_mtd * loss


# ---------------------------------------------------------------------------
# end-to-end pipeline


@dataclass(frozen=True)
class PipelineParams:
    name: str = "A"
    tracker: TrackerParams = field(default_factory=TrackerParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    preroll: int = 8
    detection_threshold: float = 0.3  # boxes scored below this never reach the tracker


PIPELINE_A = PipelineParams("A", TrackerParams(), PlannerParams(safety_margin=1.0, horizon=3.0))
PIPELINE_B = PipelineParams(
    "B",
    TrackerParams(accel_sigma=2.5, pos_sigma=0.15),
    PlannerParams(safety_margin=0.8, horizon=2.5, corridor_margin=1.2),
)
PIPELINES = {"A": PIPELINE_A, "B": PIPELINE_B}


@dataclass
class PipelineRun:
    track: TrackState
    predictions: list
    paths: list
    plans: list
    plan: Plan

    @property
    def prediction(self) -> Trajectory:
        return self.predictions[-1]


def clean_detections(seq: ScenarioSequence) -> list[DetectionBox]:
    return [clean_detection(f, seq.target_spec) for f in seq.frames]


def preroll_detections(seq: ScenarioSequence, n: int) -> list[DetectionBox]:
    """Ground-truth history before the first frame, assuming constant velocity."""
    first = seq.frames[0]
    vel = first.target_velocity
    out = []
    for j in range(n, 0, -1):
        pose = Pose2(first.target.x - vel[0] * j * seq.dt, first.target.y - vel[1] * j * seq.dt,
                     first.target.yaw)
        out.append(clean_detection(FrameState(first.t - j * seq.dt, first.ego, first.ego_speed,
                                              pose, first.target_speed, first.illumination,
                                              first.target_scale), seq.target_spec))
    return out


def run_pipeline(seq: ScenarioSequence, detections, params: PipelineParams = PIPELINE_A) -> PipelineRun:
    """Track over a clean history then the given per-frame detections, replanning each frame."""
    if len(detections) != len(seq):
        raise InvalidInputError("one detection (or None) per frame is required")
    state = None
    for det in preroll_detections(seq, params.preroll):
        state = track_update(state, det, seq.dt, params.tracker)
    p = params.planner
    overtaking = seq.maneuver == "overtake"
    preds, paths, plans = [], [], []
    for frame, det in zip(seq.frames, detections):
        if det is not None and det.confidence < params.detection_threshold:
            det = None
        state = track_update(state, det, seq.dt, params.tracker)
        pred = predict_trajectory(state, p.horizon, p.dt)
        path = ego_path(frame, p.horizon, p.dt)
        preds.append(pred)
        paths.append(path)
        plans.append(plan(frame, path, pred, p, target_width=seq.target_spec.width,
                          overtaking=overtaking))
    decel = np.array([pl.max_decel for pl in plans])
    agg = Plan(
        paths[-1],
        np.array([f.ego_speed for f in seq.frames]),
        decel,
        bool(decel.max() >= p.hard_brake_threshold),
        any(pl.overtake_abandoned for pl in plans),
        min(pl.min_distance for pl in plans),
        p.hard_brake_threshold,
    )
    return PipelineRun(state, preds, paths, plans, agg)


def fake_detections(clean: list[DetectionBox], u, s: float) -> list[DetectionBox]:
    """Shift frame k's clean center by k * s * u (k = 1..K)."""
    u = np.asarray(u, dtype=float)
    out = []
    for k, box in enumerate(clean, start=1):
        cx, cy, cz = box.center
        out.append(DetectionBox((cx + k * s * u[0], cy + k * s * u[1], cz), box.dims, box.yaw,
                                box.confidence))
    return out


def fake_prediction(seq: ScenarioSequence, u, s: float,
                    params: PipelineParams = PIPELINE_A) -> Trajectory:
    """The prediction the victim forms from detections drifting k*s*u."""
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-9 or s < 0:
        raise InvalidInputError("u must be a unit vector and s non-negative")
    return run_pipeline(seq, fake_detections(clean_detections(seq), u, s), params).prediction
