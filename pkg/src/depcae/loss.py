"""Reconstruction losses: plain MSE and depth-weighted MSE.

Both losses average over the ``W * S * S`` pixels of a window. For a batch of
windows ``(B, W, S, S)`` the result is the mean of the per-window losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from depcae.tensor import ShapeError

NORMALIZATIONS = ("none", "max-to-one")


@dataclass(frozen=True)
class DepthWeights:
    """Per-pixel depth used as loss weight ``depth ** exponent``.

    ``depth`` is either one ``(S, S)`` grid, applied to every frame, or a
    ``(W, S, S)`` stack with one grid per frame.
    """
    depth: np.ndarray
    exponent: float = 1.0
    normalization: str = "max-to-one"

    def __post_init__(self):
        z = np.asarray(self.depth, dtype=np.float64)
        if z.ndim not in (2, 3):
            raise ShapeError(f"depth grid must be (S, S) or (W, S, S), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("depth grid contains non-finite values")
        if np.any(z < 0):
            raise ValueError("depth weights must be non-negative")
        if not np.any(z > 0):
            raise ValueError("depth weights are all zero")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        object.__setattr__(self, "depth", z)

    @classmethod
    def uniform(cls, size: int, exponent: float = 1.0) -> "DepthWeights":
        return cls(np.ones((size, size)), exponent, "none")

    def grid(self) -> np.ndarray:
        """Effective multiplicative weight, after normalisation and exponent."""
        z = self.depth / self.depth.max() if self.normalization == "max-to-one" else self.depth
        return z ** self.exponent


def _check_pair(inp: np.ndarray, out: np.ndarray) -> None:
    if inp.shape != out.shape:
        raise ShapeError(f"input shape {inp.shape} != reconstruction shape {out.shape}")
    if inp.ndim < 3:
        raise ShapeError(f"expected windows (W, S, S) or (B, W, S, S), got {inp.shape}")


def _weight_for(inp: np.ndarray, weights: DepthWeights) -> np.ndarray:
    w = weights.grid()
    if w.shape[-2:] != inp.shape[-2:]:
        raise ShapeError(f"depth grid {w.shape} does not match frames {inp.shape[-2:]}")
    if w.ndim == 3 and w.shape[0] != inp.shape[-3]:
        raise ShapeError(f"depth stack has {w.shape[0]} frames, window has {inp.shape[-3]}")
    return w


def mse_loss(inp: np.ndarray, out: np.ndarray) -> float:
    _check_pair(inp, out)
    d = np.asarray(inp, np.float64) - np.asarray(out, np.float64)
    return float(np.mean(d * d))


def mse_loss_backward(inp: np.ndarray, out: np.ndarray) -> np.ndarray:
    _check_pair(inp, out)
    return -2.0 * (inp - out) / inp.size


def depth_weighted_mse(inp: np.ndarray, out: np.ndarray, weights: DepthWeights) -> float:
    _check_pair(inp, out)
    w = _weight_for(inp, weights)
    d = np.asarray(inp, np.float64) - np.asarray(out, np.float64)
    return float(np.mean(w * d * d))


def depth_weighted_mse_backward(inp: np.ndarray, out: np.ndarray, weights: DepthWeights) -> np.ndarray:
    """dL/dO = -2 * w * (I - O) / N over every element of the batch."""
    _check_pair(inp, out)
    w = _weight_for(inp, weights).astype(out.dtype, copy=False)
    return -2.0 * w * (inp - out) / inp.size


def per_window_scores(inp: np.ndarray, out: np.ndarray, weights: DepthWeights | None = None) -> np.ndarray:
    """Loss of each window in a ``(B, W, S, S)`` batch, in float64."""
    _check_pair(inp, out)
    d = np.asarray(inp, np.float64) - np.asarray(out, np.float64)
    sq = d * d
    if weights is not None:
        sq = sq * _weight_for(inp, weights)
    return sq.reshape(sq.shape[0], -1).mean(axis=1)
