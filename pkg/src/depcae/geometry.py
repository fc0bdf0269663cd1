"""Pinhole projection, the area/depth relation, and a small scene rasteriser.

Camera coordinates: X to the right, Y downwards, Z along the optical axis.
Pixel ``(row, col)`` covers ``[row, row+1) x [col, col+1)`` in image
coordinates, and the principal point sits at the image centre ``(S/2, S/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

ANOMALY_KINDS = ("none", "erratic-motion", "flicker")
ERRATIC_SPEEDUP = 4.0


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class PinholeCamera:
    focal: float
    image_size: int = 64

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if self.image_size <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")

    @property
    def principal_point(self) -> Tuple[float, float]:
        c = self.image_size / 2.0
        return c, c

    def visible_half_width(self, depth: float) -> float:
        """Half extent (world units) of the field of view at ``depth``."""
        return depth * (self.image_size / 2.0) / self.focal


def project_point(camera: PinholeCamera, point: Sequence[float], offset: bool = True) -> Tuple[float, float]:
    """Image coordinates ``focal * (X, Y) / Z``, shifted by the principal point when ``offset``."""
    x, y, z = point
    if not z > 0:
        raise BehindCameraError(f"point {tuple(point)} is not in front of the camera (Z={z})")
    u, v = camera.focal * x / z, camera.focal * y / z
    if offset:
        cx, cy = camera.principal_point
        u, v = u + cx, v + cy
    return u, v


def projected_side(focal: float, side: float, depth: float) -> float:
    """Image-plane side length of a fronto-parallel square of world side ``side``."""
    for name, val in (("focal", focal), ("side", side), ("depth", depth)):
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val}")
    return focal * side / depth


def projected_area(focal: float, side: float, depth: float) -> float:
    """Image-plane area of a fronto-parallel square of side ``side`` at ``depth``."""
    return projected_side(focal, side, depth) ** 2


@dataclass(frozen=True)
class ScoreRecord:
    raw_score: float
    per_pixel_mean: Optional[float]
    correction_factor: float
    corrected_score: float


def depth_invariant_score(raw_score: float, depth: float, area: Optional[float] = None) -> ScoreRecord:
    """Scale a raw anomaly score by ``depth**2`` so equal events score equally at any depth."""
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    if raw_score < 0:
        raise ValueError(f"raw score must be non-negative, got {raw_score}")
    factor = depth * depth
    per_pixel = raw_score / area if area else None
    return ScoreRecord(raw_score, per_pixel, factor, factor * raw_score)


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneObject:
    """A fronto-parallel square of side ``side`` centred at ``center``.

    Motion is either linear (``velocity`` per frame) or piecewise linear
    through ``waypoints`` given as ``(frame, X, Y, Z)``. Erratic objects get a
    fresh random heading every frame at ``ERRATIC_SPEEDUP`` times their speed.
    """
    center: Tuple[float, float, float]
    side: float
    intensity: float = 0.5
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    waypoints: Optional[List[Tuple[int, float, float, float]]] = None
    is_anomalous: bool = False
    anomaly_kind: str = "none"
    start_frame: int = 0
    end_frame: Optional[int] = None
    flicker_levels: Tuple[float, float] = (0.0, 1.0)
    group: Optional[dict] = None

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"side must be positive, got {self.side}")
        if self.anomaly_kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.anomaly_kind!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity}")
        zs = [self.center[2]] + [w[3] for w in (self.waypoints or [])]
        if min(zs) <= 0:
            raise ValueError("object depth must be positive everywhere")

    def active(self, t: int) -> bool:
        return t >= self.start_frame and (self.end_frame is None or t < self.end_frame)


@dataclass
class Background:
    intensity: np.ndarray
    depth: np.ndarray

    @classmethod
    def flat(cls, size: int, value: float = 0.5, z: float = 10.0) -> "Background":
        return cls(np.full((size, size), value, np.float32), np.full((size, size), z, np.float32))


class RenderResult(NamedTuple):
    frames: np.ndarray      # (F, S, S) float32 in [0, 1]
    depth: np.ndarray       # (F, S, S) float32, nearest-surface Z
    labels: np.ndarray      # (F,) bool
    warnings: List[str]
    coverage: np.ndarray    # (n_objects, F) visible pixel counts


def _trajectory(obj: SceneObject, camera: PinholeCamera, frame_count: int,
                rng: np.random.Generator) -> np.ndarray:
    """Object centre at every frame, ``(F, 3)``."""
    pos = np.empty((frame_count, 3))
    t = np.arange(frame_count, dtype=np.float64)
    if obj.waypoints:
        wp = np.array(sorted(obj.waypoints), dtype=np.float64)
        for axis in range(3):
            pos[:, axis] = np.interp(t, wp[:, 0], wp[:, axis + 1])
    else:
        rel = t - obj.start_frame
        pos[:] = np.asarray(obj.center, float) + rel[:, None] * np.asarray(obj.velocity, float)
    if obj.anomaly_kind == "erratic-motion":
        speed = ERRATIC_SPEEDUP * max(math.hypot(obj.velocity[0], obj.velocity[1]), 0.02)
        x, y, z = pos[max(obj.start_frame, 0)] if obj.start_frame < frame_count else obj.center
        for i in range(max(obj.start_frame, 0), frame_count):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            x += speed * math.cos(ang)
            y += speed * math.sin(ang)
            # bounce off the edges of the view so the object stays on screen
            half = camera.visible_half_width(z) - obj.side / 2
            if half > 0:
                x = _reflect(x, -half, half)
                y = _reflect(y, -half, half)
            pos[i] = (x, y, z)
    return pos


def _reflect(v: float, lo: float, hi: float) -> float:
    span = hi - lo
    r = (v - lo) % (2 * span)
    return lo + (r if r <= span else 2 * span - r)


def square_bounds(camera: PinholeCamera, center: Sequence[float], side: float) -> Tuple[int, int, int, int]:
    """Integer pixel box ``(r0, r1, c0, c1)`` (half-open, unclipped) of a projected square."""
    u, v = project_point(camera, center)
    n = int(round(projected_side(camera.focal, side, center[2])))
    c0 = int(math.floor(u - n / 2 + 0.5))
    r0 = int(math.floor(v - n / 2 + 0.5))
    return r0, r0 + n, c0, c0 + n


def render_scene(camera: PinholeCamera, objects: Sequence[SceneObject], frame_count: int,
                 background: Optional[Background] = None, seed: int = 0) -> RenderResult:
    """Rasterise squares onto a static background, nearest object on top.

    No anti-aliasing: every object fills whole pixels, so depth and occlusion
    are exact. A frame is anomalous iff some anomalous object has at least one
    visible pixel in it.
    """
    s = camera.image_size
    bg = background or Background.flat(s)
    if bg.intensity.shape != (s, s) or bg.depth.shape != (s, s):
        raise ValueError(f"background must be {s}x{s}")
    frames = np.repeat(bg.intensity[None].astype(np.float32), frame_count, axis=0)
    depth = np.repeat(bg.depth[None].astype(np.float32), frame_count, axis=0)
    owner = np.full((frame_count, s, s), -1, dtype=np.int32)
    trajs = [_trajectory(o, camera, frame_count, np.random.default_rng([seed, i]))
             for i, o in enumerate(objects)]
    for t in range(frame_count):
        live = [i for i, o in enumerate(objects) if o.active(t)]
        # back to front
        live.sort(key=lambda i: -trajs[i][t, 2])
        for i in live:
            obj = objects[i]
            z = trajs[i][t, 2]
            r0, r1, c0, c1 = square_bounds(camera, trajs[i][t], obj.side)
            r0, r1, c0, c1 = max(r0, 0), min(r1, s), max(c0, 0), min(c1, s)
            if r0 >= r1 or c0 >= c1:
                continue
            if obj.anomaly_kind == "flicker":
                level = obj.flicker_levels[(t - obj.start_frame) % 2]
            else:
                level = obj.intensity
            frames[t, r0:r1, c0:c1] = level
            depth[t, r0:r1, c0:c1] = z
            owner[t, r0:r1, c0:c1] = i
    coverage = np.zeros((len(objects), frame_count), dtype=np.int64)
    for i in range(len(objects)):
        coverage[i] = (owner == i).sum(axis=(1, 2))
    warnings = [f"object {i} is outside the view in every frame"
                for i in range(len(objects)) if coverage[i].sum() == 0]
    anomalous = [i for i, o in enumerate(objects) if o.is_anomalous]
    labels = (coverage[anomalous] > 0).any(axis=0) if anomalous else np.zeros(frame_count, bool)
    return RenderResult(frames, depth, labels, warnings, coverage)
