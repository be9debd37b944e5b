"""Squeeze-and-excitation channel attention.

The block averages each channel to one number, feeds that descriptor through
a ReLU bottleneck and a sigmoid gate, and multiplies every channel of the
input by its gate. Descriptors are computed per sample, never pooled across
the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import ForwardCache, Tensor, he_normal, sigmoid, sigmoid_backward

DEFAULT_RATIO = 16


@dataclass
class SEBlockParams:
    channels: int
    ratio: int
    w1: Tensor  # (C, C/r)
    b1: Tensor  # (C/r,)
    w2: Tensor  # (C/r, C)
    b2: Tensor  # (C,)

    def __post_init__(self):
        check_ratio(self.channels, self.ratio)
        c, hidden = self.channels, self.channels // self.ratio
        expected = {"w1": (c, hidden), "b1": (hidden,), "w2": (hidden, c), "b2": (c,)}
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"SE parameter {name} has shape {got}, expected {shape}")

    @property
    def hidden(self) -> int:
        return self.channels // self.ratio

    @classmethod
    def zeros(cls, channels: int, ratio: int, dtype=np.float64) -> "SEBlockParams":
        hidden = channels // ratio if ratio > 0 else 0
        return cls(channels, ratio,
                   np.zeros((channels, hidden), dtype), np.zeros(hidden, dtype),
                   np.zeros((hidden, channels), dtype), np.zeros(channels, dtype))

    @classmethod
    def he_init(cls, channels: int, ratio: int, rng: np.random.Generator,
                dtype=np.float32) -> "SEBlockParams":
        check_ratio(channels, ratio)
        hidden = channels // ratio
        return cls(channels, ratio,
                   he_normal(rng, (channels, hidden), channels, dtype), np.zeros(hidden, dtype),
                   he_normal(rng, (hidden, channels), hidden, dtype), np.zeros(channels, dtype))

    def count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size


def check_ratio(channels: int, ratio: int) -> None:
    if ratio < 1 or channels % ratio:
        raise ConfigError(f"SE reduction ratio {ratio} must divide channel count {channels}")
    if channels // ratio < 1:
        raise ConfigError(f"SE bottleneck width C/r must be >= 1 (C={channels}, r={ratio})")


def squeeze(x: Tensor) -> Tensor:
    """Global average pool: (N,H,W,C) -> (N,C)."""
    if x.ndim != 4:
        raise ShapeError(f"squeeze expects (N,H,W,C) input, got shape {x.shape}")
    return x.mean(axis=(1, 2))


def _excite(z: Tensor, params: SEBlockParams):
    if z.ndim != 2 or z.shape[1] != params.channels:
        raise ShapeError(
            f"channel descriptor shape {z.shape} does not match SE block with C={params.channels}"
        )
    pre = z @ params.w1 + params.b1
    hidden = np.maximum(pre, 0)
    s = sigmoid(hidden @ params.w2 + params.b2)
    return pre, hidden, s


def excite(z: Tensor, params: SEBlockParams) -> Tensor:
    """Gate values s = sigmoid(W2 . relu(W1 . z + b1) + b2), shape (N,C)."""
    return _excite(z, params)[2]


def scale(x: Tensor, s: Tensor) -> Tensor:
    if x.ndim != 4 or s.shape != (x.shape[0], x.shape[3]):
        raise ShapeError(f"gate shape {s.shape} cannot scale feature map {x.shape}")
    return x * s[:, None, None, :]


def se_forward(x: Tensor, params: SEBlockParams) -> tuple[Tensor, ForwardCache]:
    z = squeeze(x)
    pre, hidden, s = _excite(z, params)
    return scale(x, s), ForwardCache("se", x=x, z=z, pre=pre, hidden=hidden, s=s, params=params)


def se_backward(cache: ForwardCache, dout: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Return the input gradient and ``{"w1","b1","w2","b2"}`` gradients."""
    saved = cache.consume("se")
    x, z, pre, hidden, s, p = (saved[k] for k in ("x", "z", "pre", "hidden", "s", "params"))
    if dout.shape != x.shape:
        raise ShapeError(f"SE upstream gradient shape {dout.shape} != {x.shape}")
    ds = (dout * x).sum(axis=(1, 2))
    da2 = sigmoid_backward(s, ds)
    grads = {"w2": hidden.T @ da2, "b2": da2.sum(axis=0)}
    da1 = (da2 @ p.w2.T) * (pre > 0)
    grads["w1"] = z.T @ da1
    grads["b1"] = da1.sum(axis=0)
    dz = da1 @ p.w1.T
    h, w = x.shape[1], x.shape[2]
    dx = dout * s[:, None, None, :] + dz[:, None, None, :] / (h * w)
    return dx, grads
