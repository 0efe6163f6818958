"""Polyline helpers shared by the planner and the trajectory metrics."""
from __future__ import annotations

import numpy as np


def densify(path: np.ndarray, resolution: float = 0.1) -> np.ndarray:
    """Linearly interpolate a polyline so consecutive points are <= resolution apart."""
    path = np.asarray(path, dtype=float)
    if len(path) < 2:
        return path.copy()
    out = [path[:1]]
    for a, b in zip(path[:-1], path[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / resolution)))
        frac = np.arange(1, n + 1)[:, None] / n
        out.append(a + frac * (b - a))
    return np.concatenate(out)


def project_onto_polyline(points: np.ndarray, path: np.ndarray):
    """Closest-point projection of each point onto a polyline.

    Returns (distance, arclength, interior) arrays. ``interior`` is False when
    the closest point is an endpoint approached from outside the path's span.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    path = np.asarray(path, dtype=float)
    if len(path) == 1:
        d = np.linalg.norm(points - path[0], axis=1)
        return d, np.zeros(len(points)), np.zeros(len(points), dtype=bool)
    a = path[:-1]
    seg = path[1:] - a
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    rel = points[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t_raw = np.einsum("nmk,mk->nm", rel, seg) / np.where(seg_len > 0, seg_len ** 2, 1.0)
    t = np.clip(t_raw, 0.0, 1.0)
    closest = a[None] + t[..., None] * seg[None]
    dist = np.linalg.norm(points[:, None, :] - closest, axis=2)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(points))
    arclen = cum[best] + t[rows, best] * seg_len[best]
    tb = t_raw[rows, best]
    interior = ~(((best == 0) & (tb < 0)) | ((best == len(seg) - 1) & (tb > 1)))
    return dist[rows, best], arclen, interior
