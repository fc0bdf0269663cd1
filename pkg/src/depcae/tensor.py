"""Dense layer numerics with hand-written backward passes.

Activations are ``numpy`` arrays laid out channels-last, ``(N, H, W, C)``. A
video window enters the network with its frames folded into the batch axis,
which is exactly what a ``(1 x k x k)`` spatio-temporal kernel does: each
frame is convolved on its own.

Only the handful of layers the autoencoder needs are here: convolution,
transposed convolution, 2x2 max-pooling, batch normalisation, ReLU, sigmoid,
plus an Adam optimiser.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Triple = Tuple[int, int, int]

LAYER_KINDS = ("conv", "deconv", "maxpool", "batchnorm", "relu", "sigmoid")


class ShapeError(ValueError):
    """Raised when an array does not have the shape a layer expects."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where finite values are required."""


def _colsum(x2d: np.ndarray) -> np.ndarray:
    """Column sums of a 2-D array; a BLAS product beats ``sum(axis=0)`` on tall arrays."""
    return np.ones(x2d.shape[0], dtype=x2d.dtype) @ x2d


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: Triple = (1, 3, 3)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 1, 1)
    channels_in: int = 1
    channels_out: int = 1
    output_padding: Triple = (0, 0, 0)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "deconv", "maxpool"):
            if self.kernel[0] != 1:
                raise ValueError("temporal kernel size must be 1")
            if min(self.kernel) < 1 or min(self.stride) < 1:
                raise ValueError("kernel and stride must be positive")
            if min(self.padding) < 0:
                raise ValueError("padding must be non-negative")
            if any(p >= k for p, k in zip(self.padding[1:], self.kernel[1:])):
                raise ValueError("padding must be smaller than the kernel")
            if any(op >= max(s, p) and op > 0
                   for op, s, p in zip(self.output_padding, self.stride, self.padding)):
                raise ValueError("output_padding must be smaller than stride or padding")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ValueError("channel counts must be positive")

    @property
    def k(self) -> int:
        return self.kernel[1]

    @property
    def s(self) -> int:
        return self.stride[1]

    @property
    def p(self) -> int:
        return self.padding[1]

    @property
    def op(self) -> int:
        return self.output_padding[1]


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * pad + k + output_padding


def _expect_4d(x: np.ndarray, channels: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected 4 axes (N, H, W, C), got shape {x.shape}")
    if x.shape[3] != channels:
        raise ShapeError(f"{what}: channel axis is {x.shape[3]}, expected {channels}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded NHWC array as a contiguous ``(N, Ho, Wo, k, k, C)`` array."""
    v = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3))


def _transposed_conv(x: np.ndarray, weights: np.ndarray, k: int, stride: int, pad: int,
                     out_hw: Tuple[int, int]) -> np.ndarray:
    """Transposed convolution of NHWC ``x`` with ``weights`` (C_in, C_out, k, k), bias free.

    Computed as a stride-1 correlation of the zero-dilated input with the
    flipped kernel, so it reuses the fast im2col path. ``out_hw`` fixes the
    output size, which absorbs any output padding.
    """
    n, h, w, c = x.shape
    hd, wd = (h - 1) * stride + 1, (w - 1) * stride + 1
    lo = k - 1 - pad
    ho, wo = out_hw
    xd = np.zeros((n, ho + k - 1, wo + k - 1, c), dtype=x.dtype)
    xd[:, lo:lo + hd:stride, lo:lo + wd:stride, :] = x
    flipped = weights.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    cols = _im2col(xd, k, 1, ho, wo).reshape(n * ho * wo, -1)
    return (cols @ _conv_matrix(flipped)).reshape(n, ho, wo, weights.shape[1])


def _conv_matrix(weights: np.ndarray) -> np.ndarray:
    """(C_out, C_in, k, k) -> (k*k*C_in, C_out), matching the im2col patch order."""
    return weights.transpose(2, 3, 1, 0).reshape(-1, weights.shape[0])


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray],
                   spec: LayerSpec) -> np.ndarray:
    """Cross-correlation of ``x`` (N, H, W, C_in) with ``weights`` (C_out, C_in, k, k)."""
    _expect_4d(x, spec.channels_in, "conv2d input")
    if weights.shape != (spec.channels_out, spec.channels_in, spec.k, spec.k):
        raise ShapeError(f"conv2d weights: shape {weights.shape} does not match {spec}")
    check_finite(x, "conv2d input")
    k, s, p = spec.k, spec.s, spec.p
    ho = conv_output_size(x.shape[1], k, s, p)
    wo = conv_output_size(x.shape[2], k, s, p)
    if ho < 1:
        raise ShapeError(f"conv2d: height axis {x.shape[1]} too small for kernel {k}")
    if wo < 1:
        raise ShapeError(f"conv2d: width axis {x.shape[2]} too small for kernel {k}")
    n = x.shape[0]
    cols = _im2col(_pad(x, p), k, s, ho, wo).reshape(n * ho * wo, -1)
    out = cols @ _conv_matrix(weights)
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, spec.channels_out)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    spec: LayerSpec, input_grad: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None when not requested."""
    k, s, p = spec.k, spec.s, spec.p
    n = x.shape[0]
    ho = conv_output_size(x.shape[1], k, s, p)
    wo = conv_output_size(x.shape[2], k, s, p)
    if grad_out.shape != (n, ho, wo, spec.channels_out):
        raise ShapeError(f"conv2d grad_out: shape {grad_out.shape}, expected {(n, ho, wo, spec.channels_out)}")
    xp = _pad(x, p)
    cols = _im2col(xp, k, s, ho, wo).reshape(n * ho * wo, -1)
    g = grad_out.reshape(n * ho * wo, spec.channels_out)
    grad_w = (cols.T @ g).reshape(k, k, spec.channels_in, spec.channels_out).transpose(3, 2, 0, 1)
    grad_b = _colsum(g)
    if not input_grad:
        return None, np.ascontiguousarray(grad_w), grad_b
    grad_x = _transposed_conv(grad_out, weights, k, s, p, x.shape[1:3])
    return grad_x, np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------------------
# transposed convolution
# ---------------------------------------------------------------------------

def _deconv_matrix(weights: np.ndarray) -> np.ndarray:
    """(C_in, C_out, k, k) -> (C_in, k*k*C_out)."""
    return weights.transpose(0, 2, 3, 1).reshape(weights.shape[0], -1)


def deconv2d_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray],
                     spec: LayerSpec) -> np.ndarray:
    """Transposed convolution of NHWC ``x``; ``weights`` has shape (C_in, C_out, k, k).

    Output size per axis is ``(size - 1) * stride - 2 * pad + k + output_padding``.
    """
    _expect_4d(x, spec.channels_in, "deconv2d input")
    if weights.shape != (spec.channels_in, spec.channels_out, spec.k, spec.k):
        raise ShapeError(f"deconv2d weights: shape {weights.shape} does not match {spec}")
    check_finite(x, "deconv2d input")
    k, s, p, op = spec.k, spec.s, spec.p, spec.op
    n, h, w, _ = x.shape
    ho = deconv_output_size(h, k, s, p, op)
    wo = deconv_output_size(w, k, s, p, op)
    out = _transposed_conv(x, weights, k, s, p, (ho, wo))
    if bias is not None:
        out += bias
    return out


def deconv2d_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                      spec: LayerSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    k, s, p, op = spec.k, spec.s, spec.p, spec.op
    n, h, w, _ = x.shape
    ho = deconv_output_size(h, k, s, p, op)
    wo = deconv_output_size(w, k, s, p, op)
    if grad_out.shape != (n, ho, wo, spec.channels_out):
        raise ShapeError(f"deconv2d grad_out: shape {grad_out.shape}, expected {(n, ho, wo, spec.channels_out)}")
    full = np.zeros((n, (h - 1) * s + k + op, (w - 1) * s + k + op, spec.channels_out), dtype=grad_out.dtype)
    full[:, p:p + ho, p:p + wo, :] = grad_out
    gcols = _im2col(full, k, s, h, w).reshape(n * h * w, -1)
    xm = x.reshape(n * h * w, spec.channels_in)
    grad_w = (xm.T @ gcols).reshape(spec.channels_in, k, k, spec.channels_out).transpose(0, 3, 1, 2)
    grad_x = (gcols @ _deconv_matrix(weights).T).reshape(n, h, w, spec.channels_in)
    grad_b = _colsum(grad_out.reshape(-1, spec.channels_out))
    return grad_x, np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------------------
# pooling, normalisation, activations
# ---------------------------------------------------------------------------

def maxpool2x2_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns the pooled array and the winner index (0..3, first max wins) per output."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool input: expected 4 axes, got shape {x.shape}")
    n, h, w, c = x.shape
    if h % 2:
        raise ShapeError(f"maxpool: height axis {h} is odd")
    if w % 2:
        raise ShapeError(f"maxpool: width axis {w} is odd")
    # row pairs and column pairs become contiguous halves after reshaping
    r = x.reshape(n, h // 2, 2, w // 2, 2, c)
    q = [r[:, :, a, :, b, :] for a in (0, 1) for b in (0, 1)]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.full(out.shape, 3, dtype=np.int8)
    for i in (2, 1, 0):
        idx[q[i] == out] = i
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    if idx.shape != grad_out.shape:
        raise ShapeError(f"maxpool grad_out: shape {grad_out.shape}, expected {idx.shape}")
    n, h2, w2, c = grad_out.shape
    out = np.zeros((n, h2, 2, w2, 2, c), dtype=grad_out.dtype)
    i = 0
    for a in (0, 1):
        for b in (0, 1):
            out[:, :, a, :, b, :] = np.where(idx == i, grad_out, 0)
            i += 1
    return out.reshape(n, 2 * h2, 2 * w2, c)


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      running_mean: np.ndarray, running_var: np.ndarray,
                      training: bool, momentum: float = 0.1,
                      eps: float = 1e-5) -> Tuple[np.ndarray, Optional[BatchNormCache]]:
    """Per-channel batch normalisation over the (N, H, W) axes.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    if x.ndim != 4 or x.shape[3] != gamma.shape[0]:
        raise ShapeError(f"batchnorm input: shape {x.shape} does not match {gamma.shape[0]} channels")
    if training:
        m = x.size // x.shape[3]
        flat = x.reshape(m, -1)
        mean = _colsum(flat) / m
        xc = flat - mean
        var = _colsum(xc * xc) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xc *= inv_std
        xhat = xc.reshape(x.shape)
        return xhat * gamma + beta, BatchNormCache(xhat, inv_std)
    scale = (gamma / np.sqrt(running_var + eps)).astype(x.dtype)
    out = x * scale
    out += (beta - running_mean * scale).astype(x.dtype)
    return out, None


def batchnorm_backward(grad_out: np.ndarray, gamma: np.ndarray,
                       cache: BatchNormCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = grad_out.shape[3]
    m = grad_out.size // c
    g = grad_out.reshape(m, c)
    xhat = cache.xhat.reshape(m, c)
    grad_gamma = _colsum(g * xhat)
    grad_beta = _colsum(g)
    # dL/dx = gamma * inv_std / m * (m g - sum g - xhat sum(g xhat))
    scale = gamma * cache.inv_std / m
    grad_x = scale * (m * g - grad_beta - xhat * grad_gamma)
    return grad_x.reshape(grad_out.shape), grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_out * y * (1 - y)


# ---------------------------------------------------------------------------
# layer objects (parameter + cache holders used by the model)
# ---------------------------------------------------------------------------

class Layer:
    spec: LayerSpec

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.training = True
        # the first layer of a network never needs dL/d(input)
        self.input_grad = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__(spec)
        fan_in = spec.channels_in * spec.k * spec.k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.channels_out, spec.channels_in, spec.k, spec.k))
        self.params["weight"] = w.astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(spec.channels_out, dtype=dtype)
        self._x = None

    def forward(self, x):
        self._x = x if self.training else None
        return conv2d_forward(x, self.params["weight"], self.params.get("bias"), self.spec)

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(grad, self._x, self.params["weight"], self.spec, self.input_grad)
        self.grads["weight"] = gw
        if "bias" in self.params:
            self.grads["bias"] = gb
        return gx


class ConvTranspose2d(Layer):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__(spec)
        # fan-in of a transposed conv: input channels hitting one output pixel
        fan_in = spec.channels_in * spec.k * spec.k / (spec.s * spec.s)
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (spec.channels_in, spec.channels_out, spec.k, spec.k))
        self.params["weight"] = w.astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(spec.channels_out, dtype=dtype)
        self._x = None

    def forward(self, x):
        self._x = x if self.training else None
        return deconv2d_forward(x, self.params["weight"], self.params.get("bias"), self.spec)

    def backward(self, grad):
        gx, gw, gb = deconv2d_backward(grad, self._x, self.params["weight"], self.spec)
        self.grads["weight"] = gw
        if "bias" in self.params:
            self.grads["bias"] = gb
        return gx


class MaxPool2d(Layer):
    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        self._idx = None

    def forward(self, x):
        out, idx = maxpool2x2_forward(x)
        self._idx = idx if self.training else None
        return out

    def backward(self, grad):
        return maxpool2x2_backward(grad, self._idx)


class BatchNorm2d(Layer):
    def __init__(self, spec: LayerSpec, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(spec)
        c = spec.channels_out
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            self.training, self.momentum, self.eps)
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self.params["gamma"], self._cache)
        self.grads["gamma"] = gg
        self.grads["beta"] = gb
        return gx


class ReLU(Layer):
    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        self._x = None

    def forward(self, x):
        self._x = x if self.training else None
        return relu(x)

    def backward(self, grad):
        return relu_backward(grad, self._x)


class Sigmoid(Layer):
    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        self._y = None

    def forward(self, x):
        y = sigmoid(x)
        self._y = y if self.training else None
        return y

    def backward(self, grad):
        return sigmoid_backward(grad, self._y)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state
