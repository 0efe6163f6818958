"""Differentiable texture -> detection surrogate.

A texture is a plain ``(H, W, 3)`` float array in [0, 1]. The detector never
sees pixels directly: an atlas pools each body face into six statistics, the
current view scales those statistics, and a frozen bias-free two-layer network
maps the 24 scaled features to a bounded box perturbation. Because the network
has no bias terms, an all-zero feature vector reproduces the clean box exactly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import InvalidInputError, NotVisibleError
from .scene import (
    FACES,
    CameraModel,
    DetectionBox,
    FrameState,
    Pose2,
    VehicleSpec,
    face_visibility,
    projected_area,
    target_box,
    viewing_angle,
    wrap_angle,
)

__all__ = [
    "DetectionBox", "FaceAtlas", "SurrogateDetector", "ViewContext", "EotRanges",
    "EotSample", "N_FEATURES", "pool_features", "detect", "detect_with_gradient",
    "view_context", "sample_eot", "apply_eot", "new_texture", "remap_texture",
    "write_texture", "read_texture", "write_ppm", "read_ppm",
]

STATS_PER_FACE = 6  # mean R, mean G, mean B, gradient energy, x-moment, y-moment
N_FEATURES = STATS_PER_FACE * len(FACES)
N_OUTPUTS = 7  # x, y, yaw, l, w, h, conf
OUTPUT_NAMES = ("x", "y", "yaw", "l", "w", "h", "conf")
DEFAULT_RESOLUTION = 64


def new_texture(resolution=DEFAULT_RESOLUTION, rng=None, noise: float = 0.05) -> np.ndarray:
    """Mid-gray texture with optional uniform noise, clipped to [0, 1]."""
    h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
    tex = np.full((h, w, 3), 0.5)
    if rng is not None and noise > 0:
        tex += rng.uniform(-noise, noise, size=tex.shape)
    return np.clip(tex, 0.0, 1.0)


def _check_texture(texture: np.ndarray) -> None:
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise InvalidInputError("texture must have shape (H, W, 3)")


# ---------------------------------------------------------------------------
# face atlas


@dataclass(frozen=True, eq=False)
class FaceAtlas:
    """Rectangular texture region per body face plus an attachable-area mask.

    ``rects`` maps face -> (row0, row1, col0, col1); ``masks`` holds a boolean
    array of the rect's shape, False on windows, tires and mirrors.
    """

    resolution: tuple[int, int]
    rects: dict
    masks: dict

    @classmethod
    def for_vehicle(cls, spec: VehicleSpec, resolution=DEFAULT_RESOLUTION) -> "FaceAtlas":
        h, w = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
        if h < 8 or w < 16:
            raise InvalidInputError("texture resolution too small for an atlas")
        # faces laid out as a strip wrapping the body: front | left | rear | right
        order = ("front", "left", "rear", "right")
        widths = np.array([spec.width, spec.length, spec.width, spec.length])
        edges = np.round(np.concatenate([[0], np.cumsum(widths)]) / widths.sum() * w).astype(int)
        rects, masks = {}, {}
        for i, face in enumerate(order):
            c0, c1 = int(edges[i]), int(edges[i + 1])
            rects[face] = (0, h, c0, c1)
            masks[face] = _face_mask(face, h, c1 - c0)
        return cls((h, w), rects, masks)

    @cached_property
    def _operators(self):
        h, w = self.resolution
        rows, cols, vals = [], [], []
        pair_a, pair_b, pair_face = [], [], []
        n_pairs = np.zeros(len(FACES))
        for fi, face in enumerate(FACES):
            r0, r1, c0, c1 = self.rects[face]
            mask = self.masks[face]
            rr, cc = np.nonzero(mask)
            n = len(rr)
            if n == 0:
                raise InvalidInputError(f"face {face} has no attachable pixels")
            fh, fw = mask.shape
            pix = (rr + r0) * w + (cc + c0)
            ux = (cc + 0.5) / fw - 0.5
            vy = (rr + 0.5) / fh - 0.5
            base = fi * STATS_PER_FACE
            for ch in range(3):
                idx = pix * 3 + ch
                rows.append(np.full(n, base + ch)); cols.append(idx); vals.append(np.full(n, 1.0 / n))
                rows.append(np.full(n, base + 4)); cols.append(idx); vals.append(ux / (3 * n))
                rows.append(np.full(n, base + 5)); cols.append(idx); vals.append(vy / (3 * n))
            horiz = mask[:, 1:] & mask[:, :-1]
            hr, hc = np.nonzero(horiz)
            vert = mask[1:, :] & mask[:-1, :]
            vr, vc = np.nonzero(vert)
            a = np.concatenate([(hr + r0) * w + hc + c0, (vr + r0) * w + vc + c0])
            b = np.concatenate([(hr + r0) * w + hc + 1 + c0, (vr + 1 + r0) * w + vc + c0])
            pair_a.append(a); pair_b.append(b); pair_face.append(np.full(len(a), fi))
            n_pairs[fi] = max(len(a), 1)
        linear = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(N_FEATURES, h * w * 3),
        )
        return linear, np.concatenate(pair_a), np.concatenate(pair_b), np.concatenate(pair_face), n_pairs

    @cached_property
    def attachable(self) -> np.ndarray:
        """Boolean (H, W) map of pixels that belong to some face mask."""
        out = np.zeros(self.resolution, dtype=bool)
        for face in FACES:
            r0, r1, c0, c1 = self.rects[face]
            out[r0:r1, c0:c1] |= self.masks[face]
        return out

    def raw_stats(self, texture: np.ndarray) -> np.ndarray:
        """Unscaled per-face statistics, shape (24,)."""
        _check_texture(texture)
        if texture.shape[:2] != self.resolution:
            raise InvalidInputError("texture resolution does not match the atlas")
        linear, a, b, face, n_pairs = self._operators
        flat = texture.reshape(-1, 3)
        out = linear @ texture.reshape(-1)
        diff = flat[a] - flat[b]
        energy = np.bincount(face, weights=(diff * diff).sum(axis=1), minlength=len(FACES))
        out[3::STATS_PER_FACE] = energy / (3.0 * n_pairs)
        return out

    def raw_stats_vjp(self, texture: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Pull a gradient on the 24 raw statistics back to texture pixels."""
        linear, a, b, face, n_pairs = self._operators
        h, w = self.resolution
        grad = (linear.T @ g).reshape(h * w, 3)
        g_energy = g[3::STATS_PER_FACE]
        if np.any(g_energy):
            flat = texture.reshape(-1, 3)
            coef = (2.0 * g_energy / (3.0 * n_pairs))[face]
            d = (flat[a] - flat[b]) * coef[:, None]
            for ch in range(3):
                grad[:, ch] += np.bincount(a, weights=d[:, ch], minlength=h * w)
                grad[:, ch] -= np.bincount(b, weights=d[:, ch], minlength=h * w)
        return grad.reshape(h, w, 3)


def _face_mask(face: str, h: int, w: int) -> np.ndarray:
    """Attachable pixels of one face: windows, tires and mirrors removed."""
    v = (np.arange(h) + 0.5)[:, None] / h
    u = (np.arange(w) + 0.5)[None, :] / w
    if face in ("front", "rear"):
        window = v < 0.35
        tires = (v > 0.85) & ((u < 0.2) | (u > 0.8))
        excluded = window | tires
    else:
        window = v < 0.3
        tires = (v > 0.75) & (((u > 0.12) & (u < 0.3)) | ((u > 0.7) & (u < 0.88)))
        mirror_u = (u > 0.75) & (u < 0.85) if face == "left" else (u > 0.15) & (u < 0.25)
        mirror = (v >= 0.3) & (v < 0.4) & mirror_u
        excluded = window | tires | mirror
    return ~np.broadcast_to(excluded, (h, w)).copy()


def remap_texture(texture: np.ndarray, src: FaceAtlas, dst: FaceAtlas) -> np.ndarray:
    """Resample each face region of ``src`` onto the matching region of ``dst``."""
    out = np.full((*dst.resolution, 3), 0.5)
    for face in FACES:
        sr0, sr1, sc0, sc1 = src.rects[face]
        dr0, dr1, dc0, dc1 = dst.rects[face]
        rows = sr0 + ((np.arange(dr1 - dr0) + 0.5) * (sr1 - sr0) / (dr1 - dr0)).astype(int)
        cols = sc0 + ((np.arange(dc1 - dc0) + 0.5) * (sc1 - sc0) / (dc1 - dc0)).astype(int)
        out[dr0:dr1, dc0:dc1] = texture[np.ix_(rows, cols)]
    return out


# ---------------------------------------------------------------------------
# view context


@dataclass(frozen=True)
class ViewContext:
    visibility: np.ndarray  # (4,) per face, in FACES order
    view: float             # aspect angle, radians
    exposure: float         # illumination after motion attenuation
    area_factor: float      # projected area / reference area, in [0, 1]
    heading: float = 0.0    # camera yaw; response offsets live in this frame

    def scales(self) -> np.ndarray:
        return view_scales(self.visibility, self.view, self.exposure, self.area_factor)


def view_scales(visibility, view: float, illumination: float, area_factor: float) -> np.ndarray:
    """Per-feature multipliers for one view, shape (24,)."""
    vis = np.asarray(visibility, dtype=float)
    if vis.shape != (4,) or np.any(vis < 0) or np.any(vis > 1):
        raise InvalidInputError("visibility must be 4 weights in [0, 1]")
    # horizontal moments are foreshortened by the face's obliqueness to the line of sight
    c, s = abs(math.cos(view)), abs(math.sin(view))
    foreshortening = np.array([c, c, s, s])
    per_face = np.ones((4, STATS_PER_FACE))
    per_face[:, 4] = foreshortening
    return (per_face * (vis * illumination * area_factor)[:, None]).reshape(-1)


def pool_features(texture, atlas: FaceAtlas, visibility, view: float,
                  illumination: float, area_factor: float) -> np.ndarray:
    """View-scaled pooled statistics (the detector's 24-dim input)."""
    return view_scales(visibility, view, illumination, area_factor) * atlas.raw_stats(texture)


# ---------------------------------------------------------------------------
# detector


@dataclass(frozen=True, eq=False)
class SurrogateDetector:
    """Frozen bias-free 24 -> 16 -> 7 response network.

    Offsets are bounded: the BEV center shift is radially squashed to at most
    ``kappa``; yaw, dims and confidence go through tanh.
    """

    w1: np.ndarray
    w2: np.ndarray
    kappa: float = 1.5
    seed: int = 42
    yaw_gain: float = 0.25
    dim_gain: float = 0.3
    conf_beta: float = 4.0
    reference_area: float = 1.5e5
    blur_speed: float = 15.0

    @classmethod
    def create(cls, seed: int = 42, kappa: float = 1.5, hidden: int = 16,
               input_gain: float = 6.0, **kw) -> "SurrogateDetector":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, input_gain / math.sqrt(N_FEATURES), size=(hidden, N_FEATURES))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(N_OUTPUTS, hidden))
        w1.setflags(write=False)
        w2.setflags(write=False)
        return cls(w1, w2, kappa=kappa, seed=seed, **kw)

    def respond(self, features: np.ndarray):
        """Raw deltas (dx, dy, dyaw, dl, dw, dh, dconf) and a backprop cache."""
        h = np.tanh(self.w1 @ features)
        z = self.w2 @ h
        r = math.hypot(z[0], z[1])
        g = math.tanh(r) / r if r > 1e-8 else 1.0 - r * r / 3.0
        u = z[6] - self.conf_beta * float(np.mean(h * h))
        deltas = np.empty(N_OUTPUTS)
        deltas[0:2] = self.kappa * g * z[0:2]
        deltas[2] = self.yaw_gain * math.tanh(z[2])
        deltas[3:6] = self.dim_gain * np.tanh(z[3:6])
        deltas[6] = math.tanh(u)
        return deltas, (h, z, r, g, u)

    def respond_vjp(self, cache, g_deltas: np.ndarray) -> np.ndarray:
        h, z, r, g, u = cache
        g_z = np.empty(N_OUTPUTS)
        # Jacobian of v * tanh(|v|)/|v| is g I + (g'/r) v v^T
        dg_over_r = ((1.0 - math.tanh(r) ** 2) * r - math.tanh(r)) / r ** 3 if r > 1e-8 else -2.0 / 3.0
        v = z[0:2]
        gv = g_deltas[0:2]
        g_z[0:2] = self.kappa * (g * gv + dg_over_r * v * float(v @ gv))
        g_z[2] = g_deltas[2] * self.yaw_gain * (1.0 - math.tanh(z[2]) ** 2)
        g_z[3:6] = g_deltas[3:6] * self.dim_gain * (1.0 - np.tanh(z[3:6]) ** 2)
        g_u = g_deltas[6] * (1.0 - math.tanh(u) ** 2)
        g_z[6] = g_u
        g_h = self.w2.T @ g_z - g_u * self.conf_beta * 2.0 * h / len(h)
        return self.w1.T @ (g_h * (1.0 - h * h))


def apply_deltas(clean: DetectionBox, deltas: np.ndarray, heading: float = 0.0) -> DetectionBox:
    c, s = math.cos(heading), math.sin(heading)
    dx = c * deltas[0] - s * deltas[1]
    dy = s * deltas[0] + c * deltas[1]
    dims = tuple(d + dd for d, dd in zip(clean.dims, deltas[3:6]))
    cx, cy, cz = clean.center
    return DetectionBox(
        (cx + dx, cy + dy, cz + deltas[5] / 2.0),
        dims,
        clean.yaw + deltas[2],
        min(1.0, max(0.0, clean.confidence + deltas[6])),
    )


def output_vector(box: DetectionBox) -> np.ndarray:
    return np.array([box.center[0], box.center[1], box.yaw, *box.dims, box.confidence])


def outputs_to_deltas_vjp(clean: DetectionBox, deltas: np.ndarray, g_out: np.ndarray,
                          heading: float = 0.0) -> np.ndarray:
    """Map a gradient on box outputs (x, y, yaw, l, w, h, conf) to raw deltas."""
    c, s = math.cos(heading), math.sin(heading)
    g = np.array(g_out, dtype=float)
    gx, gy = g[0], g[1]
    g[0] = c * gx + s * gy
    g[1] = -s * gx + c * gy
    conf = clean.confidence + deltas[6]
    if not 0.0 < conf < 1.0:
        g[6] = 0.0
    return g


def detect(clean: DetectionBox, features: np.ndarray, det: SurrogateDetector,
           heading: float = 0.0) -> DetectionBox:
    """Attacked box = clean box plus the bounded network response."""
    deltas, _ = det.respond(np.asarray(features, dtype=float))
    return apply_deltas(clean, deltas, heading)


def detect_with_gradient(clean: DetectionBox, texture: np.ndarray, atlas: FaceAtlas,
                         ctx: ViewContext, det: SurrogateDetector):
    """Attacked box and d(output)/d(texture), shape (7, H, W, 3).

    Output order is (x, y, yaw, l, w, h, conf).
    """
    scales = ctx.scales()
    features = scales * atlas.raw_stats(texture)
    deltas, cache = det.respond(features)
    box = apply_deltas(clean, deltas, ctx.heading)
    jac = np.empty((N_OUTPUTS, *texture.shape))
    for i in range(N_OUTPUTS):
        e = np.zeros(N_OUTPUTS)
        e[i] = 1.0
        g_d = outputs_to_deltas_vjp(clean, deltas, e, ctx.heading)
        g_f = det.respond_vjp(cache, g_d)
        jac[i] = atlas.raw_stats_vjp(texture, scales * g_f)
    return box, jac


def view_context(frame: FrameState, spec: VehicleSpec, camera: CameraModel,
                 det: SurrogateDetector) -> ViewContext:
    """Geometry-derived feature scaling for one frame."""
    cam = camera.world_pose(frame.ego)
    vis = face_visibility(cam, frame.target, spec, scale=frame.target_scale)
    view = viewing_angle(cam, frame.target)
    try:
        area = projected_area(camera, target_box(frame, spec), frame.ego)
    except NotVisibleError:
        area, vis = 0.0, np.zeros(4)
    exposure = frame.illumination / (1.0 + frame.relative_speed / det.blur_speed)
    return ViewContext(vis, view, exposure, min(1.0, area / det.reference_area), cam.yaw)


# ---------------------------------------------------------------------------
# expectation over transformation


@dataclass(frozen=True)
class EotRanges:
    """Symmetric half-widths around the identity transform."""

    yaw: float = 0.1
    translation: float = 0.2
    depth: float = 0.1
    scale: float = 0.05

    def __post_init__(self):
        if min(self.yaw, self.translation, self.depth, self.scale) < 0:
            raise InvalidInputError("EoT half-widths must be non-negative")
        if self.depth >= 1 or self.scale >= 1:
            raise InvalidInputError("depth and scale half-widths must stay below 1")

    @property
    def is_identity(self) -> bool:
        return self.yaw == self.translation == self.depth == self.scale == 0.0


@dataclass(frozen=True)
class EotSample:
    yaw_jitter: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    depth_ratio: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.depth_ratio <= 0 or self.scale <= 0:
            raise InvalidInputError("depth ratio and scale must be positive")


IDENTITY_SAMPLE = EotSample()


def sample_eot(ranges: EotRanges, rng: np.random.Generator) -> EotSample:
    if ranges.is_identity:
        return IDENTITY_SAMPLE
    yaw = rng.uniform(-ranges.yaw, ranges.yaw)
    tx, ty = rng.uniform(-ranges.translation, ranges.translation, size=2)
    depth = rng.uniform(1.0 - ranges.depth, 1.0 + ranges.depth)
    scale = rng.uniform(1.0 - ranges.scale, 1.0 + ranges.scale)
    return EotSample(float(yaw), (float(tx), float(ty)), float(depth), float(scale))


def apply_eot(frame: FrameState, sample: EotSample, camera: CameraModel | None = None) -> FrameState:
    """Jitter the target pose, push it along the camera ray, rescale its body."""
    if sample == IDENTITY_SAMPLE:
        return frame
    t = frame.target
    x, y = t.x + sample.translation[0], t.y + sample.translation[1]
    if sample.depth_ratio != 1.0:
        origin = camera.world_pose(frame.ego) if camera is not None else frame.ego
        x = origin.x + (x - origin.x) * sample.depth_ratio
        y = origin.y + (y - origin.y) * sample.depth_ratio
    return replace(
        frame,
        target=Pose2(x, y, t.yaw + sample.yaw_jitter),
        target_scale=frame.target_scale * sample.scale,
    )


# ---------------------------------------------------------------------------
# texture files

SIDECAR_MAGIC = b"VDTX"
_HEADER = struct.Struct("<4sIII")  # magic, H, W, channels -> 16 bytes


def write_texture(path, texture: np.ndarray) -> tuple[Path, Path]:
    """Write ``<path>.ppm`` (8-bit preview) and ``<path>.f32`` (exact float32)."""
    _check_texture(texture)
    base = Path(path)
    if base.suffix in (".ppm", ".f32"):
        base = base.with_suffix("")
    ppm = base.with_suffix(".ppm")
    raw = base.with_suffix(".f32")
    write_ppm(ppm, texture)
    h, w, _ = texture.shape
    with open(raw, "wb") as fh:
        fh.write(_HEADER.pack(SIDECAR_MAGIC, h, w, 3))
        fh.write(np.ascontiguousarray(texture, dtype="<f4").tobytes())
    return ppm, raw


def read_texture(path) -> np.ndarray:
    """Read the float sidecar written by :func:`write_texture`."""
    raw = Path(path)
    if raw.suffix != ".f32":
        raw = raw.with_suffix(".f32")
    data = raw.read_bytes()
    magic, h, w, c = _HEADER.unpack_from(data)
    if magic != SIDECAR_MAGIC or c != 3:
        raise InvalidInputError(f"{raw} is not a texture sidecar")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=h * w * 3)
    return arr.reshape(h, w, 3).astype(np.float64)


def write_ppm(path, texture: np.ndarray) -> None:
    h, w, _ = texture.shape
    pix = np.round(np.clip(texture, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise InvalidInputError("only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    pix = np.frombuffer(data, dtype=np.uint8, offset=pos, count=w * h * 3)
    return pix.reshape(h, w, 3) / 255.0
