"""Evaluation metrics for attacked pipeline runs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .attack import FidelityVector, loss_fid
from .downstream import Plan, Trajectory
from .errors import InvalidInputError, UndefinedMetricError
from .geometry import densify
from .scene import DetectionBox


@dataclass(frozen=True)
class FrameDisplacements:
    d: tuple

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(float(x) for x in self.d))
        if not self.d:
            raise InvalidInputError("no displacements")

    def __len__(self) -> int:
        return len(self.d)

    @property
    def progressive(self) -> bool:
        return all(a < b for a, b in zip(self.d, self.d[1:]))


def _as_d(sample) -> tuple:
    return sample.d if isinstance(sample, FrameDisplacements) else tuple(float(x) for x in sample)


def pdr(samples: Sequence) -> float:
    """Percentage of samples whose displacements strictly increase frame to frame."""
    if len(samples) == 0:
        raise InvalidInputError("pdr needs at least one sample")
    hits = sum(FrameDisplacements(_as_d(s)).progressive for s in samples)
    return 100.0 * hits / len(samples)


def ape(clean: Trajectory, attacked: Trajectory) -> float:
    if len(clean) != len(attacked) or not np.array_equal(clean.times, attacked.times):
        raise InvalidInputError("trajectories must share timestamps")
    return float(np.mean(np.linalg.norm(attacked.points - clean.points, axis=1)))


def mtd(attacked_prediction: Trajectory, ego_plan_path: Trajectory, resolution: float = 0.1) -> float:
    """Closest approach between predicted waypoints and the densified ego path."""
    pts = np.asarray(attacked_prediction.points if isinstance(attacked_prediction, Trajectory)
                     else attacked_prediction, dtype=float)
    path = np.asarray(ego_plan_path.points if isinstance(ego_plan_path, Trajectory)
                      else ego_plan_path, dtype=float)
    if len(pts) == 0 or len(path) == 0:
        raise InvalidInputError("empty trajectory")
    dense = densify(path, resolution)
    diff = pts[:, None, :] - dense[None, :, :]
    return float(np.sqrt((diff * diff).sum(axis=2).min()))


def mbd(plan_or_profile) -> float:
    profile = plan_or_profile.decel_profile if isinstance(plan_or_profile, Plan) else plan_or_profile
    profile = np.asarray(profile, dtype=float)
    return float(profile.max()) if profile.size else 0.0


def asr(mbds: Sequence[float], threshold: float = 3.0) -> float:
    if len(mbds) == 0:
        raise InvalidInputError("asr needs at least one run")
    return 100.0 * sum(m >= threshold for m in mbds) / len(mbds)


def cv(values: Iterable[float]) -> float:
    """Population standard deviation over mean."""
    xs = np.asarray(list(values), dtype=float)
    if xs.size == 0:
        raise InvalidInputError("cv needs at least one value")
    mean = float(xs.mean())
    if mean == 0.0:
        raise UndefinedMetricError("coefficient of variation is undefined for zero mean")
    return float(xs.std()) / mean


def bfs(clean: DetectionBox, attacked: DetectionBox) -> float:
    return math.exp(-loss_fid(FidelityVector.of(attacked), FidelityVector.of(clean)))


def mean_displacement(d) -> float:
    d = _as_d(d)
    if len(d) != 3:
        raise InvalidInputError("mean displacement is defined over three frames")
    return (d[0] + d[1] + d[2]) / 3.0


@dataclass(frozen=True)
class MetricReport:
    d1: float
    d2: float
    d3: float
    pdr: float
    ape: float
    mtd: float
    mbd: float
    asr: float
    cv: float
    bfs: float

    def __post_init__(self):
        if not (0 <= self.pdr <= 100 and 0 <= self.asr <= 100):
            raise InvalidInputError("pdr and asr are percentages")
        if not 0 <= self.bfs <= 1:
            raise InvalidInputError("bfs must lie in [0, 1]")
        if self.mbd < 0:
            raise InvalidInputError("mbd must be non-negative")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return asdict(self)

    @classmethod
    def aggregate(cls, reports: Sequence["MetricReport"]) -> "MetricReport":
        """Column means; pdr and asr become rates over the pooled runs."""
        if not reports:
            raise InvalidInputError("nothing to aggregate")
        cols = {c: float(np.mean([getattr(r, c) for r in reports])) for c in cls.columns()}
        return cls(**cols)
