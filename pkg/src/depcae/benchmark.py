"""Synthetic corridor footage with known depth, anomalies and proxy outliers.

The scene is a corridor seen from a ceiling-mounted camera: the bottom of the
image is floor close to the lens, the top centre is the far end. Normal
activity is people (grey squares standing on the floor) walking across the
view in near, middle and far lanes. Test windows may contain one anomalous
actor (flickering or moving erratically) at a random depth. Training clips
carry proxy outliers: oversized objects close to the camera and crowded
windows.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from depcae.geometry import Background, PinholeCamera, SceneObject, render_scene
from depcae.pipeline import (
    MANIFEST_SCHEMA_VERSION, refine_labels, save_tns, validate_manifest, window_id, window_length,
    write_manifest,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkProfile:
    name: str = "corridor"
    image_size: int = 64
    focal: float = 64.0
    camera_height: float = 1.2       # camera above the floor
    ceiling_clearance: float = 1.0   # ceiling above the camera
    half_width: float = 1.5
    far_z: float = 14.0
    fps: int = 15
    window_seconds: int = 5
    windows_per_clip: int = 4
    train_clips: int = 12
    test_clips: int = 25
    proxy_windows: int = 5
    anomaly_ratio: float = 0.07
    people_per_window: Tuple[int, int] = (1, 3)
    near_passer_prob: float = 0.5
    person_side: Tuple[float, float] = (0.6, 0.9)
    person_intensity: Tuple[float, float] = (0.35, 0.6)
    walk_speed: Tuple[float, float] = (0.03, 0.06)
    lanes: Tuple[Tuple[float, float], ...] = ((2.6, 3.5), (4.0, 6.0), (7.0, 10.0))
    anomaly_depth: Tuple[float, float] = (3.0, 10.0)
    anomaly_side: Tuple[float, float] = (0.6, 0.8)
    # the model sees one frame at a time, so motion-only anomalies are opt-in
    anomaly_kinds: Tuple[str, ...] = ("flicker",)
    oversized_side: Tuple[float, float] = (1.6, 2.2)
    oversized_depth: Tuple[float, float] = (3.0, 10.0)
    crowd_size: Tuple[int, int] = (7, 10)
    texture_amplitude: float = 0.03
    participants: Tuple[Tuple[str, str], ...] = (("P1", "F"), ("P2", "M"), ("P3", "F"), ("P4", "M"))

    @property
    def camera(self) -> PinholeCamera:
        return PinholeCamera(self.focal, self.image_size)

    @property
    def window_frames(self) -> int:
        return window_length(self.fps, self.window_seconds)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


PROFILES: Dict[str, BenchmarkProfile] = {
    "corridor": BenchmarkProfile(),
    "corridor-small": BenchmarkProfile(name="corridor-small", train_clips=3, test_clips=4,
                                       windows_per_clip=2, proxy_windows=1, anomaly_ratio=0.125),
    "corridor-motion": BenchmarkProfile(name="corridor-motion", anomaly_kinds=("flicker", "erratic-motion")),
}


def get_profile(profile: Union[str, BenchmarkProfile]) -> BenchmarkProfile:
    if isinstance(profile, BenchmarkProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}") from None


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# background
# ---------------------------------------------------------------------------

def corridor_background(p: BenchmarkProfile, seed: int = 0) -> Background:
    """Per-pixel depth from ray/plane intersections, plus a shaded texture."""
    s, f = p.image_size, p.focal
    c = s / 2.0
    centers = np.arange(s) + 0.5
    dy = (centers - c)[:, None] / f * np.ones((1, s))
    dx = np.ones((s, 1)) * (centers - c)[None, :] / f
    inf = np.full((s, s), np.inf)
    with np.errstate(divide="ignore"):
        floor = np.where(dy > 0, p.camera_height / np.where(dy > 0, dy, 1), inf)
        ceil = np.where(dy < 0, p.ceiling_clearance / np.where(dy < 0, -dy, 1), inf)
        walls = np.where(dx != 0, p.half_width / np.where(dx != 0, np.abs(dx), 1), inf)
    depth = np.minimum.reduce([floor, ceil, walls, np.full((s, s), p.far_z)])
    surface = np.argmin(np.stack([floor, ceil, walls, np.full((s, s), p.far_z)]), axis=0)
    base = np.choose(surface, [0.30, 0.78, 0.55, 0.66])
    # farther surfaces fade slightly, like falling illumination
    shade = base * (1.0 - 0.25 * depth / p.far_z)
    rng = np.random.default_rng([seed, 9999])
    texture = p.texture_amplitude * rng.standard_normal((s, s))
    intensity = np.clip(shade + texture, 0.0, 1.0)
    return Background(intensity.astype(np.float32), depth.astype(np.float32))


# ---------------------------------------------------------------------------
# activity generators
# ---------------------------------------------------------------------------

def _person(p: BenchmarkProfile, rng, start: int, end: int, z: float, side: Optional[float] = None,
            intensity: Optional[float] = None) -> SceneObject:
    side = side if side is not None else rng.uniform(*p.person_side)
    half = z * (p.image_size / 2) / p.focal
    x = rng.uniform(-half, half)
    speed = rng.uniform(*p.walk_speed) * rng.choice([-1.0, 1.0])
    y = p.camera_height - side / 2
    inten = intensity if intensity is not None else rng.uniform(*p.person_intensity)
    return SceneObject((x, y, z), side, inten, (speed, 0.0, 0.0), start_frame=start, end_frame=end)


def _normal_activity(p: BenchmarkProfile, rng, start: int, end: int) -> List[SceneObject]:
    objs = []
    for _ in range(rng.integers(p.people_per_window[0], p.people_per_window[1] + 1)):
        lane = p.lanes[rng.integers(1, len(p.lanes))]
        objs.append(_person(p, rng, start, end, rng.uniform(*lane)))
    if rng.random() < p.near_passer_prob:
        objs.append(_person(p, rng, start, end, rng.uniform(*p.lanes[0])))
    return objs


def _oversized(p: BenchmarkProfile, rng, start: int, end: int) -> List[SceneObject]:
    z = rng.uniform(*p.oversized_depth)
    side = rng.uniform(*p.oversized_side)
    return [_person(p, rng, start, end, z, side=side, intensity=rng.uniform(0.15, 0.85))]


def _crowd(p: BenchmarkProfile, rng, start: int, end: int) -> List[SceneObject]:
    n = rng.integers(p.crowd_size[0], p.crowd_size[1] + 1)
    return [_person(p, rng, start, end, rng.uniform(*p.lanes[rng.integers(len(p.lanes))]))
            for _ in range(n)]


def _anomaly(p: BenchmarkProfile, rng, start: int, end: int, participant: Tuple[str, str]) -> SceneObject:
    kind = p.anomaly_kinds[rng.integers(len(p.anomaly_kinds))]
    z = rng.uniform(*p.anomaly_depth)
    obj = _person(p, rng, start, end, z, side=rng.uniform(*p.anomaly_side))
    half = z * (p.image_size / 2) / p.focal
    # keep the actor in the inner part of the view so it is on screen
    cx = rng.uniform(-0.6 * half, 0.6 * half)
    obj.center = (cx, obj.center[1], z)
    obj.is_anomalous = True
    obj.anomaly_kind = kind
    obj.group = {"participant": participant[0], "sex": participant[1]}
    if kind == "erratic-motion":
        obj.velocity = (abs(obj.velocity[0]), 0.0, 0.0)
    return obj


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def _plan_windows(n: int, k: int, rng) -> List[int]:
    return sorted(rng.choice(n, size=k, replace=False).tolist()) if k else []


def make_benchmark(profile: Union[str, BenchmarkProfile], seed: int, root) -> dict:
    """Render a train/test dataset under ``root`` and return its manifest.

    Output layout: ``train/clips/*.tns``, ``test/clips/*.tns``,
    ``depth/static.tns`` and ``manifest.json``. Same profile and seed give a
    byte-identical tree.
    """
    p = get_profile(profile)
    root = Path(root)
    cam = p.camera
    w = p.window_frames
    n_frames = w * p.windows_per_clip
    bg = corridor_background(p, seed)
    digest = config_hash({"profile": p.to_dict(), "seed": int(seed)})
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "profile": p.to_dict(),
        "seed": int(seed),
        "config_hash": digest,
        "fps": p.fps,
        "window_seconds": p.window_seconds,
        "frame_size": p.image_size,
        "camera": {"f": p.focal, "image_size": p.image_size},
        "depth": {"path": "depth/static.tns", "source": "static-reference"},
        "clips": [],
        "windows": [],
    }
    save_tns(root / "depth" / "static.tns", bg.depth, "static_depth")

    split_rng = np.random.default_rng([seed, 0])
    n_train = p.train_clips * p.windows_per_clip
    n_test = p.test_clips * p.windows_per_clip
    proxy_slots = set(_plan_windows(n_train, min(p.proxy_windows, n_train), split_rng))
    n_anom = int(round(p.anomaly_ratio * n_test))
    anom_slots = _plan_windows(n_test, n_anom, split_rng)
    anom_participant = {slot: p.participants[i % len(p.participants)] for i, slot in enumerate(anom_slots)}

    for split, n_clips, split_id in (("train", p.train_clips, 1), ("test", p.test_clips, 2)):
        for ci in range(n_clips):
            rng = np.random.default_rng([seed, split_id, ci])
            clip_id = f"{split}_{ci:03d}"
            objects: List[SceneObject] = []
            anomalous, proxy = [], []
            groups: Dict[int, dict] = {}
            for wi in range(p.windows_per_clip):
                slot = ci * p.windows_per_clip + wi
                s0, s1 = wi * w, (wi + 1) * w
                objects += _normal_activity(p, rng, s0, s1)
                if split == "train" and slot in proxy_slots:
                    maker = _oversized if rng.random() < 0.5 else _crowd
                    objects += maker(p, rng, s0, s1)
                    proxy.append((s0, s1))
                if split == "test" and slot in anom_participant:
                    obj = _anomaly(p, rng, s0, s1, anom_participant[slot])
                    objects.append(obj)
                    groups[s0] = obj.group
            result = render_scene(cam, objects, n_frames, bg, seed=int(rng.integers(2**31)))
            for msg in result.warnings:
                log.warning("%s: %s", clip_id, msg)
            # annotate from what was actually visible
            anomalous = _intervals(result.labels)
            rel = f"{split}/clips/{clip_id}.tns"
            save_tns(root / rel, result.frames, clip_id)
            manifest["clips"].append({
                "id": clip_id, "split": split, "path": rel, "n_frames": n_frames, "fps": p.fps,
                "anomalous_intervals": anomalous, "proxy_outlier_intervals": proxy,
            })
            starts = list(range(0, n_frames, w))
            is_anom = refine_labels(starts, w, anomalous)
            is_proxy = refine_labels(starts, w, proxy)
            for s, a, pr in zip(starts, is_anom, is_proxy):
                label = "anomalous" if a else ("proxy_outlier" if pr else "normal")
                manifest["windows"].append({
                    "id": window_id(clip_id, s), "clip": clip_id, "split": split, "start": s,
                    "label": label, "group": groups.get(s) if a else None,
                })
    problems = validate_manifest(manifest, root)
    if problems:
        raise RuntimeError("generated manifest is invalid: " + "; ".join(problems))
    write_manifest(root, manifest)
    return manifest


def _intervals(mask: np.ndarray) -> List[List[int]]:
    out = []
    start = None
    for i, v in enumerate(mask.tolist() + [False]):
        if v and start is None:
            start = i
        elif not v and start is not None:
            out.append([start, i])
            start = None
    return out
