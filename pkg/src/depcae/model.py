"""The depth-weighted convolutional autoencoder and its checkpoint file."""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from depcae.tensor import (
    BatchNorm2d, Conv2d, ConvTranspose2d, Layer, LayerSpec, MaxPool2d, ReLU, ShapeError, Sigmoid,
    check_finite,
)

DEFAULT_CHANNELS = (16, 32, 64)
WINDOW_SHAPE = (75, 64, 64)

CHECKPOINT_MAGIC = b"DCAE"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def _block(name, spec, rng, dtype, bias):
    """conv/deconv -> batchnorm -> relu, as (name, layer) pairs."""
    cls = Conv2d if spec.kind == "conv" else ConvTranspose2d
    return [
        (f"{name}.{spec.kind}", cls(spec, rng, bias=bias, dtype=dtype)),
        (f"{name}.bn", BatchNorm2d(LayerSpec("batchnorm", channels_in=spec.channels_out,
                                             channels_out=spec.channels_out), dtype=dtype)),
        (f"{name}.relu", ReLU(LayerSpec("relu"))),
    ]


class DepCaeModel:
    """Encoder: three conv(1x3x3)-BN-ReLU blocks with 2x2 pooling after the
    first two. Decoder: three transposed convs with strides 1, 2, 2 and a
    sigmoid on the last one.

    A window ``(W, S, S)`` is run as ``W`` single-channel frames.
    """

    def __init__(self, channel_plan: Sequence[int] = DEFAULT_CHANNELS, seed: int = 0,
                 dtype=np.float32, input_shape=WINDOW_SHAPE):
        plan = tuple(int(c) for c in channel_plan)
        if len(plan) != 3 or min(plan) < 1:
            raise ValueError(f"channel plan must be three positive ints, got {channel_plan!r}")
        if input_shape[1] % 4 or input_shape[2] % 4:
            raise ValueError(f"spatial size must be divisible by 4, got {input_shape[1:]}")
        self.channel_plan = plan
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.input_shape = tuple(input_shape)
        rng = np.random.default_rng(self.seed)
        c1, c2, c3 = plan

        def conv(cin, cout):
            return LayerSpec("conv", (1, 3, 3), (1, 1, 1), (0, 1, 1), cin, cout)

        def deconv(cin, cout, stride):
            op = (0, stride - 1, stride - 1)
            return LayerSpec("deconv", (1, 3, 3), (1, stride, stride), (0, 1, 1), cin, cout, op)

        pool = LayerSpec("maxpool", (1, 2, 2), (1, 2, 2), (0, 0, 0))
        # conv biases ahead of batchnorm are redundant and left out
        enc: List = []
        enc += _block("enc1", conv(1, c1), rng, dtype, bias=False)
        enc.append(("enc1.pool", MaxPool2d(pool)))
        enc += _block("enc2", conv(c1, c2), rng, dtype, bias=False)
        enc.append(("enc2.pool", MaxPool2d(pool)))
        enc += _block("enc3", conv(c2, c3), rng, dtype, bias=False)
        dec: List = []
        dec += _block("dec1", deconv(c3, c2, 1), rng, dtype, bias=False)
        dec += _block("dec2", deconv(c2, c1, 2), rng, dtype, bias=False)
        dec.append(("dec3.deconv", ConvTranspose2d(deconv(c1, 1, 2), rng, bias=True, dtype=dtype)))
        dec.append(("dec3.sigmoid", Sigmoid(LayerSpec("sigmoid"))))
        enc[0][1].input_grad = False
        self.encoder_layers = enc
        self.decoder_layers = dec
        self.training = False
        self.set_training(False)

    # -- parameter access -------------------------------------------------
    @property
    def layers(self):
        return self.encoder_layers + self.decoder_layers

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{ln}.{pn}": p for ln, layer in self.layers for pn, p in layer.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {f"{ln}.{gn}": g for ln, layer in self.layers for gn, g in layer.grads.items()}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"{ln}.{bn}": b for ln, layer in self.layers for bn, b in layer.buffers.items()}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            if arr.shape != own[name].shape:
                raise CheckpointError(f"{name}: shape {arr.shape}, expected {own[name].shape}")
            own[name][...] = arr

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def zero_(self) -> "DepCaeModel":
        for p in self.parameters().values():
            p[...] = 0
        return self

    def set_training(self, training: bool) -> "DepCaeModel":
        self.training = training
        for _, layer in self.layers:
            layer.training = training
        return self

    # -- forward / backward -----------------------------------------------
    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[2:] != self.input_shape[1:]:
            raise ShapeError(f"expected windows of spatial shape {self.input_shape[1:]}, got {x.shape}")
        check_finite(x, "window")
        return x

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Bottleneck activations, ``(B, W, S/4, S/4, C)``."""
        x = self._check_batch(x)
        b, w = x.shape[:2]
        h = x.reshape(b * w, *x.shape[2:], 1).astype(self.dtype, copy=False)
        for _, layer in self.encoder_layers:
            h = layer.forward(h)
        return h.reshape(b, w, *h.shape[1:])

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Reconstruct a batch of windows ``(B, W, S, S)`` (or one ``(W, S, S)``)."""
        single = x.ndim == 3
        x = self._check_batch(x)
        b, w = x.shape[:2]
        h = x.reshape(b * w, *x.shape[2:], 1).astype(self.dtype, copy=False)
        for _, layer in self.layers:
            h = layer.forward(h)
        out = h.reshape(x.shape)
        return out[0] if single else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Backpropagate dL/d(output); parameter gradients land in ``gradients()``.

        Returns None: the gradient with respect to the input frames is not computed.
        """
        if not self.training:
            raise RuntimeError("backward requires training mode")
        shape = grad_out.shape
        g = grad_out.reshape(-1, *shape[-2:], 1).astype(self.dtype, copy=False)
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return None if g is None else g.reshape(shape)


def build_model(channel_plan: Sequence[int] = DEFAULT_CHANNELS, seed: int = 0, dtype=np.float32,
                input_shape=WINDOW_SHAPE) -> DepCaeModel:
    return DepCaeModel(channel_plan, seed, dtype, input_shape)


def reconstruct(model: DepCaeModel, window: np.ndarray) -> np.ndarray:
    """Inference-mode reconstruction of one window or a batch of windows."""
    window = np.asarray(window)
    if window.shape[-3:] != model.input_shape:
        raise ShapeError(f"window shape {window.shape} does not match model input {model.input_shape}")
    was_training = model.training
    model.set_training(False)
    try:
        return model.forward(window)
    finally:
        model.set_training(was_training)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    format_version: int
    channel_plan: tuple
    tensors: Dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0
    input_shape: tuple = WINDOW_SHAPE

    def to_model(self) -> DepCaeModel:
        model = DepCaeModel(self.channel_plan, self.seed, np.float32, self.input_shape)
        model.load_state_dict(self.tensors)
        return model


_META = "__meta__"


def _encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: DepCaeModel, path, config: Optional[dict] = None) -> Path:
    """Write the model atomically (temp file + rename).

    Metadata (channel plan, seed, input shape, config) travels as a UTF-8 JSON
    blob stored byte-per-element in a rank-1 tensor named ``__meta__``.
    """
    path = Path(path)
    meta = {
        "channel_plan": list(model.channel_plan),
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "config": config or {},
    }
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tensors = {_META: blob.astype(np.float32)}
    tensors.update(model.state_dict())
    data = _encode_tensors(tensors)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch, file is corrupt or truncated")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint format version {version} is not supported")
    off = 12
    tensors: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", body, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if off + size > len(body):
                raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=off).reshape(dims).copy()
            off += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes")
    if _META not in tensors:
        raise CheckpointError(f"{path}: missing metadata tensor")
    meta = json.loads(tensors.pop(_META).astype(np.uint8).tobytes().decode("utf-8"))
    return ModelCheckpoint(version, tuple(meta["channel_plan"]), tensors, meta.get("config", {}),
                           meta.get("seed", 0), tuple(meta.get("input_shape", WINDOW_SHAPE)))


def load_checkpoint(path) -> DepCaeModel:
    return read_checkpoint(path).to_model()
