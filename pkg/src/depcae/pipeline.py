"""Frame preprocessing, windowing, the ``.tns`` tensor file and dataset manifests."""
from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

LUMA = (0.299, 0.587, 0.114)
DEFAULT_FPS = 15
DEFAULT_WINDOW_SECONDS = 5
LABELS = ("normal", "anomalous", "proxy_outlier")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _bilinear_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling (edges clamped)."""
    h, w = img.shape

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h)
    c0, c1, fc = axis(w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def preprocess_frame(raw: np.ndarray, size: int = 64) -> np.ndarray:
    """Grayscale, scale 0..255 to 0..1 and resize to ``size x size``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("empty frame")
    if raw.ndim == 3 and raw.shape[2] in (3, 4):
        raw = raw[..., 0] * LUMA[0] + raw[..., 1] * LUMA[1] + raw[..., 2] * LUMA[2]
    elif raw.ndim == 3 and raw.shape[2] == 1:
        raw = raw[..., 0]
    if raw.ndim != 2:
        raise ValueError(f"frame must be HxW gray or HxWx3 colour, got shape {raw.shape}")
    gray = raw / 255.0
    if gray.shape != (size, size):
        gray = _bilinear_resize(gray, size)
    return gray.astype(np.float32)


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass
class Window:
    frames: np.ndarray
    source_clip: str
    start_frame: int
    label: str = "normal"
    group: Optional[dict] = None

    @property
    def id(self) -> str:
        return window_id(self.source_clip, self.start_frame)


def window_id(clip: str, start: int) -> str:
    return f"{clip}@{start}"


def window_length(fps: float, window_seconds: float) -> int:
    w = Fraction(fps).limit_denominator(10**6) * Fraction(window_seconds).limit_denominator(10**6)
    if w.denominator != 1 or w < 1:
        raise ValueError(f"fps * window_seconds = {float(w)} is not a positive integer")
    return int(w)


def window_starts(n_frames: int, fps: float = DEFAULT_FPS,
                  window_seconds: float = DEFAULT_WINDOW_SECONDS) -> List[int]:
    w = window_length(fps, window_seconds)
    return list(range(0, (n_frames // w) * w, w))


def refine_labels(starts: Sequence[int], length: int,
                  intervals: Iterable[Tuple[int, int]]) -> List[bool]:
    """True for every window sharing at least one frame with a half-open interval."""
    ivs = [(int(a), int(b)) for a, b in intervals if b > a]
    return [any(a < s + length and b > s for a, b in ivs) for s in starts]


def windowize(frames: np.ndarray, fps: float = DEFAULT_FPS,
              window_seconds: float = DEFAULT_WINDOW_SECONDS, clip_id: str = "clip",
              anomalous: Iterable[Tuple[int, int]] = (),
              proxy: Iterable[Tuple[int, int]] = ()) -> List[Window]:
    """Cut a clip into non-overlapping windows; the trailing remainder is dropped.

    Windows are views into ``frames``. A window overlapping an anomalous
    interval by one frame or more is anomalous; otherwise one overlapping a
    proxy interval is a proxy outlier.
    """
    w = window_length(fps, window_seconds)
    starts = window_starts(len(frames), fps, window_seconds)
    if not starts:
        log.warning("clip %s has %d frames, shorter than one %d-frame window", clip_id, len(frames), w)
        return []
    anom = refine_labels(starts, w, anomalous)
    prox = refine_labels(starts, w, proxy)
    out = []
    for s, a, p in zip(starts, anom, prox):
        label = "anomalous" if a else ("proxy_outlier" if p else "normal")
        out.append(Window(frames[s:s + w], clip_id, s, label))
    return out


# ---------------------------------------------------------------------------
# .tns tensor files
# ---------------------------------------------------------------------------

TNS_MAGIC = b"TNS1"
TNS_VERSION = 1
TNS_MAX_RANK = 8
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sIBBHI")  # magic, version, rank, dtype, reserved, name length


class TnsError(ValueError):
    pass


class TnsChecksumError(TnsError):
    pass


def encode_tns(arr: np.ndarray, name: str = "") -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code = 1
    elif arr.dtype == np.float32:
        code = 0
    else:
        raise TnsError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > TNS_MAX_RANK:
        raise TnsError(f"rank {arr.ndim} exceeds {TNS_MAX_RANK}")
    raw_name = name.encode("utf-8")
    body = b"".join([
        _HEADER.pack(TNS_MAGIC, TNS_VERSION, arr.ndim, code, 0, len(raw_name)),
        raw_name,
        struct.pack(f"<{arr.ndim}Q", *arr.shape),
        np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tns(data: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, str]:
    if len(data) < _HEADER.size + 4:
        raise TnsChecksumError(f"{source}: file too short, truncated")
    magic = data[:4]
    if magic != TNS_MAGIC:
        raise TnsError(f"{source}: bad magic {magic!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise TnsChecksumError(f"{source}: CRC32 mismatch")
    _, version, rank, code, _, name_len = _HEADER.unpack_from(body)
    if version != TNS_VERSION:
        raise TnsError(f"{source}: unsupported version {version}")
    if rank > TNS_MAX_RANK:
        raise TnsError(f"{source}: rank {rank} exceeds {TNS_MAX_RANK}")
    if code not in _DTYPES:
        raise TnsError(f"{source}: unknown dtype code {code}")
    off = _HEADER.size
    name = body[off:off + name_len].decode("utf-8")
    off += name_len
    dims = struct.unpack_from(f"<{rank}Q", body, off)
    off += 8 * rank
    dt = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if off + count * dt.itemsize != len(body):
        raise TnsError(f"{source}: payload size does not match dims {dims}")
    arr = np.frombuffer(body, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), name


def save_tns(path, arr: np.ndarray, name: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tns(arr, name))
    return path


def load_tns(path) -> np.ndarray:
    return decode_tns(Path(path).read_bytes(), str(path))[0]


def tns_size(shape: Sequence[int], name: str = "", dtype=np.float32) -> int:
    """Exact file size in bytes of a tensor saved with :func:`save_tns`."""
    return _HEADER.size + len(name.encode("utf-8")) + 8 * len(shape) \
        + int(np.prod(shape)) * np.dtype(dtype).itemsize + 4


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA_VERSION = 1


class ManifestError(ValueError):
    pass


def validate_manifest(manifest: dict, root: Optional[Path] = None) -> List[str]:
    """Return a list of problems; an empty list means the manifest is valid.

    Checks the schema, that every window lies inside an existing clip range,
    and that the train split holds no anomalous window.
    """
    problems = []
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        problems.append(f"schema_version must be {MANIFEST_SCHEMA_VERSION}")
    for key in ("fps", "window_seconds", "frame_size", "clips", "windows"):
        if key not in manifest:
            problems.append(f"missing key {key!r}")
    if problems:
        return problems
    try:
        w = window_length(manifest["fps"], manifest["window_seconds"])
    except ValueError as exc:
        return [str(exc)]
    clips = {}
    for clip in manifest["clips"]:
        for key in ("id", "split", "path", "n_frames"):
            if key not in clip:
                problems.append(f"clip missing {key!r}: {clip}")
        if clip.get("split") not in ("train", "test"):
            problems.append(f"clip {clip.get('id')}: split must be train or test")
        if root is not None and "path" in clip and not (Path(root) / clip["path"]).exists():
            problems.append(f"clip {clip.get('id')}: file {clip['path']} does not exist")
        clips[clip.get("id")] = clip
    seen = set()
    for win in manifest["windows"]:
        cid, start, label = win.get("clip"), win.get("start"), win.get("label")
        if cid not in clips:
            problems.append(f"window {win.get('id')}: unknown clip {cid!r}")
            continue
        clip = clips[cid]
        if not isinstance(start, int) or start < 0 or start % w or start + w > clip["n_frames"]:
            problems.append(f"window {win.get('id')}: start {start} outside clip range or misaligned")
        if label not in LABELS:
            problems.append(f"window {win.get('id')}: bad label {label!r}")
        if clip["split"] == "train" and label == "anomalous":
            problems.append(f"window {win.get('id')}: train split contains an anomalous window")
        if win.get("id") in seen:
            problems.append(f"duplicate window id {win.get('id')}")
        seen.add(win.get("id"))
    return problems


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_manifest(root, manifest: dict) -> Path:
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_windows(root, split: str, manifest: Optional[dict] = None) -> List[Window]:
    """Read every window of one split, in manifest order."""
    root = Path(root)
    manifest = manifest or load_manifest(root)
    w = window_length(manifest["fps"], manifest["window_seconds"])
    clips = {c["id"]: c for c in manifest["clips"] if c["split"] == split}
    cache: Dict[str, np.ndarray] = {}
    out = []
    for win in manifest["windows"]:
        clip = clips.get(win["clip"])
        if clip is None:
            continue
        if clip["id"] not in cache:
            cache[clip["id"]] = load_tns(root / clip["path"])
        frames = cache[clip["id"]][win["start"]:win["start"] + w]
        out.append(Window(frames, clip["id"], win["start"], win["label"], win.get("group")))
    return out


def load_depth(root, manifest: Optional[dict] = None) -> np.ndarray:
    manifest = manifest or load_manifest(root)
    return load_tns(Path(root) / manifest["depth"]["path"])


def export_label_csv(manifest: dict, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "window_start", "label"])
        for win in manifest["windows"]:
            writer.writerow([win["clip"], win["start"], win["label"]])
    return path
