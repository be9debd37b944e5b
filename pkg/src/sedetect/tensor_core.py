"""Numerical kernels on dense NHWC arrays.

Tensors are plain :class:`numpy.ndarray` objects in row-major order; float32 is
the training precision and float64 is used for gradient verification. Every
kernel that has a backward pass returns ``(output, ForwardCache)`` and a
matching ``*_backward`` function consumes that cache exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import EmptyBatchError, ShapeError, StaleCacheError, UnsupportedKernelError

Tensor = np.ndarray

KERNEL_SIZE = 3
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3


class ForwardCache:
    """Values saved by one forward call for one backward call."""

    __slots__ = ("op", "_values")

    def __init__(self, op: str, **values: Any):
        self.op = op
        self._values: dict[str, Any] | None = values

    @property
    def consumed(self) -> bool:
        return self._values is None

    def peek(self, key: str) -> Any:
        """Read a saved value without consuming the cache."""
        if self._values is None:
            raise StaleCacheError(f"{self.op} cache already consumed")
        return self._values[key]

    def consume(self, op: str) -> dict[str, Any]:
        if self.op != op:
            raise StaleCacheError(f"cache from {self.op!r} passed to {op!r} backward")
        if self._values is None:
            raise StaleCacheError(f"{op} cache already consumed by an earlier backward call")
        values, self._values = self._values, None
        return values


def as_tensor(data, dtype=np.float32) -> Tensor:
    """Copy ``data`` into a contiguous array of the given precision."""
    return np.ascontiguousarray(data, dtype=dtype)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(padded: Tensor, height: int, width: int) -> Tensor:
    # (N, H+2, W+2, C) -> (N, H, W, 9*C), last axis ordered (di, dj, ci)
    return np.concatenate(
        [padded[:, di:di + height, dj:dj + width, :]
         for di in range(KERNEL_SIZE) for dj in range(KERNEL_SIZE)],
        axis=-1,
    )


def _check_conv_shapes(x: Tensor, kernels: Tensor, bias: Tensor) -> None:
    if kernels.ndim != 4 or kernels.shape[:2] != (KERNEL_SIZE, KERNEL_SIZE):
        raise UnsupportedKernelError(
            f"only 3x3 kernels are supported, got kernel shape {kernels.shape}"
        )
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects input of rank 4 (N,H,W,C), got shape {x.shape}")
    if x.shape[3] != kernels.shape[2]:
        raise ShapeError(
            f"conv2d input has {x.shape[3]} channels but kernels expect {kernels.shape[2]}"
        )
    if bias.shape != (kernels.shape[3],):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({kernels.shape[3]},)")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> tuple[Tensor, ForwardCache]:
    """3x3 convolution, stride 1, zero "same" padding.

    ``x`` is (N,H,W,Cin), ``kernels`` is (3,3,Cin,Cout) and ``bias`` is (Cout,).
    """
    _check_conv_shapes(x, kernels, bias)
    n, h, w, cin = x.shape
    cout = kernels.shape[3]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(padded, h, w).reshape(n * h * w, 9 * cin)
    out = cols @ kernels.reshape(9 * cin, cout)
    out += bias
    # keep only the padded input; columns are rebuilt in backward to bound memory
    return out.reshape(n, h, w, cout), ForwardCache("conv2d", padded=padded, kernels=kernels)


def conv2d_backward(cache: ForwardCache, dout: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(dx, dkernels, dbias)``."""
    saved = cache.consume("conv2d")
    padded, kernels = saved["padded"], saved["kernels"]
    n, hp, wp, cin = padded.shape
    h, w = hp - 2, wp - 2
    cout = kernels.shape[3]
    if dout.shape != (n, h, w, cout):
        raise ShapeError(f"conv2d upstream gradient shape {dout.shape} != {(n, h, w, cout)}")
    d2 = dout.reshape(-1, cout)
    cols = _im2col(padded, h, w).reshape(-1, 9 * cin)
    dkernels = (cols.T @ d2).reshape(kernels.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ kernels.reshape(9 * cin, cout).T).reshape(n, h, w, 9, cin)
    dpadded = np.zeros_like(padded)
    for k in range(9):
        di, dj = divmod(k, KERNEL_SIZE)
        dpadded[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, k, :]
    return dpadded[:, 1:-1, 1:-1, :], dkernels, dbias


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool2x2(x: Tensor) -> tuple[Tensor, ForwardCache]:
    """Non-overlapping 2x2 max pooling with stride 2.

    Ties resolve to the first position in row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects rank 4 input, got shape {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(n, h // 2, w // 2, c, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, ForwardCache("maxpool2x2", argmax=argmax, shape=x.shape)


def maxpool2x2_backward(cache: ForwardCache, dout: Tensor) -> Tensor:
    saved = cache.consume("maxpool2x2")
    argmax, (n, h, w, c) = saved["argmax"], saved["shape"]
    if dout.shape != argmax.shape:
        raise ShapeError(f"maxpool upstream gradient shape {dout.shape} != {argmax.shape}")
    dwin = np.zeros(argmax.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, argmax[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(n, h, w, c)


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> tuple[Tensor, ForwardCache]:
    if x.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense inner extents disagree: input {x.shape} vs weights {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias, ForwardCache("dense", x=x, weights=weights)


def dense_backward(cache: ForwardCache, dout: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    saved = cache.consume("dense")
    x, weights = saved["x"], saved["weights"]
    return dout @ weights.T, x.T @ dout, dout.sum(axis=0)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x: Tensor) -> tuple[Tensor, ForwardCache]:
    return np.maximum(x, 0), ForwardCache("relu", mask=x > 0)


def relu_backward(cache: ForwardCache, dout: Tensor) -> Tensor:
    mask = cache.consume("relu")["mask"]
    return dout * mask


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped so results stay strictly inside (0, 1)."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dtype, copy=False)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    info = np.finfo(dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def sigmoid_backward(out: Tensor, dout: Tensor) -> Tensor:
    """Gradient through the sigmoid given its forward output."""
    return dout * out * (1.0 - out)


def softmax(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax expects (N, K>=2) input, got shape {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics."""

    gamma: Tensor
    beta: Tensor
    moving_mean: Tensor
    moving_variance: Tensor
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            moving_mean=np.zeros(channels, dtype),
            moving_variance=np.ones(channels, dtype),
            **kw,
        )


def batchnorm(x: Tensor, params: BatchNormParams, mode: str = "train") -> tuple[Tensor, ForwardCache]:
    """Normalize over every axis but the last (channels).

    In ``"train"`` mode the batch statistics are used and the running
    statistics in ``params`` are updated in place.
    """
    if x.shape[-1] != params.gamma.shape[0]:
        raise ShapeError(
            f"batchnorm has {params.gamma.shape[0]} channels, input has shape {x.shape}"
        )
    if x.size == 0:
        raise EmptyBatchError("batchnorm received an empty batch")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = params.momentum
        params.moving_mean[...] = m * params.moving_mean + (1 - m) * mean
        params.moving_variance[...] = m * params.moving_variance + (1 - m) * var
    elif mode == "infer":
        mean, var = params.moving_mean, params.moving_variance
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype, copy=False)
    xhat = (x - mean) * inv_std
    out = params.gamma * xhat + params.beta
    return out, ForwardCache("batchnorm", xhat=xhat, inv_std=inv_std, gamma=params.gamma, mode=mode)


def batchnorm_backward(cache: ForwardCache, dout: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(dx, dgamma, dbeta)``."""
    saved = cache.consume("batchnorm")
    xhat, inv_std, gamma = saved["xhat"], saved["inv_std"], saved["gamma"]
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if saved["mode"] == "infer":
        return dxhat * inv_std, dgamma, dbeta
    count = dout.size // dout.shape[-1]
    dx = (inv_std / count) * (
        count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> Tensor:
    """Normal(0, sqrt(2/fan_in)) draws, redrawn until inside +/-2 std."""
    std = np.sqrt(2.0 / fan_in)
    draws = rng.standard_normal(shape)
    bad = np.abs(draws) > 2.0
    while bad.any():
        draws[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(draws) > 2.0
    return (draws * std).astype(dtype)
