"""Sequential CNN with optional squeeze-and-excitation stages.

Each conv stage is ``Conv3x3 -> ReLU -> BatchNorm [-> SE] -> MaxPool``; the
head is ``Flatten -> Dense -> ReLU -> Dense -> Softmax``. The reference
configuration takes 224x224x3 input through widths 32..512 and carries SE
blocks on the four deepest stages.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    IncompatibleArchiveError,
    ShapeError,
    StaleCacheError,
)
from .se_block import SEBlockParams, check_ratio, se_backward, se_forward

ORDERS = ("relu_bn", "bn_relu")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 224
    input_channels: int = 3
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    se_stages: tuple[int, ...] = (1, 2, 3, 4)
    ratio: int = 16
    dense_units: int = 512
    num_classes: int = 2
    order: str = "relu_bn"

    def validate(self) -> "ModelConfig":
        if not self.widths:
            raise ConfigError("widths: at least one conv stage is required")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths: every width must be >= 1, got {list(self.widths)}")
        if self.input_size < 1 or self.input_channels < 1:
            raise ConfigError("input_size and input_channels must be >= 1")
        factor = 2 ** len(self.widths)
        if self.input_size % factor:
            raise ConfigError(
                f"input_size: {self.input_size} is not divisible by 2^{len(self.widths)} = {factor}"
            )
        bad = [s for s in self.se_stages if not 0 <= s < len(self.widths)]
        if bad:
            raise ConfigError(f"se_stages: {bad} are not conv stage indices 0..{len(self.widths) - 1}")
        if len(set(self.se_stages)) != len(self.se_stages):
            raise ConfigError(f"se_stages: duplicate stage in {list(self.se_stages)}")
        for s in self.se_stages:
            try:
                check_ratio(self.widths[s], self.ratio)
            except ConfigError as exc:
                raise ConfigError(f"ratio: stage {s}: {exc}") from None
        if self.dense_units < 1:
            raise ConfigError("dense_units must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.order not in ORDERS:
            raise ConfigError(f"order: expected one of {ORDERS}, got {self.order!r}")
        return self

    def without_se(self) -> "ModelConfig":
        return replace(self, se_stages=())

    @property
    def final_size(self) -> int:
        return self.input_size // 2 ** len(self.widths)

    @property
    def flatten_width(self) -> int:
        return self.final_size ** 2 * self.widths[-1]


REFERENCE_CONFIG = ModelConfig()
DESK_CONFIG = ModelConfig(input_size=32, widths=(8, 16, 32, 64, 128), ratio=4, dense_units=64)
PRESETS = {"reference": REFERENCE_CONFIG, "desk": DESK_CONFIG}


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Layer:
    """Base layer: holds trainable ``params``, non-trainable ``buffers`` and ``grads``."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache: tc.ForwardCache | None = None

    def state(self) -> dict[str, np.ndarray]:
        """Every stored tensor, in archive order."""
        return {**self.params, **self.buffers}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x, mode):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _take_cache(self) -> tc.ForwardCache:
        if self.cache is None:
            raise StaleCacheError(f"{self.name}: backward called without a train-mode forward")
        cache, self.cache = self.cache, None
        return cache


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, name, cin, cout, rng, dtype):
        super().__init__(name)
        self.params["kernel"] = tc.he_normal(rng, (3, 3, cin, cout), 9 * cin, dtype)
        self.params["bias"] = np.zeros(cout, dtype)

    def output_shape(self, shape):
        return shape[:-1] + (self.params["kernel"].shape[3],)

    def forward(self, x, mode):
        out, cache = tc.conv2d(x, self.params["kernel"], self.params["bias"])
        self.cache = cache if mode == "train" else None
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = tc.conv2d_backward(self._take_cache(), dout)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode):
        out, cache = tc.relu(x)
        self.cache = cache if mode == "train" else None
        return out

    def backward(self, dout):
        return tc.relu_backward(self._take_cache(), dout)


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, dtype):
        super().__init__(name)
        self.bn = tc.BatchNormParams.identity(channels, dtype)
        self.params = {"gamma": self.bn.gamma, "beta": self.bn.beta}
        self.buffers = {"moving_mean": self.bn.moving_mean,
                        "moving_variance": self.bn.moving_variance}

    def forward(self, x, mode):
        out, cache = tc.batchnorm(x, self.bn, mode)
        self.cache = cache if mode == "train" else None
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = tc.batchnorm_backward(self._take_cache(), dout)
        return dx


class SEBlock(Layer):
    kind = "se"

    def __init__(self, name, channels, ratio, rng, dtype):
        super().__init__(name)
        self.se = SEBlockParams.he_init(channels, ratio, rng, dtype)
        self.params = {"w1": self.se.w1, "b1": self.se.b1, "w2": self.se.w2, "b2": self.se.b2}

    def forward(self, x, mode):
        out, cache = se_forward(x, self.se)
        self.cache = cache if mode == "train" else None
        return out

    def backward(self, dout):
        dx, grads = se_backward(self._take_cache(), dout)
        self.grads.update(grads)
        return dx


class MaxPool(Layer):
    kind = "maxpool"

    def output_shape(self, shape):
        return (shape[0], shape[1] // 2, shape[2] // 2, shape[3])

    def forward(self, x, mode):
        out, cache = tc.maxpool2x2(x)
        self.cache = cache if mode == "train" else None
        return out

    def backward(self, dout):
        return tc.maxpool2x2_backward(self._take_cache(), dout)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x, mode):
        self.cache = tc.ForwardCache("flatten", shape=x.shape) if mode == "train" else None
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._take_cache().consume("flatten")["shape"])


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, din, dout, rng, dtype):
        super().__init__(name)
        self.params["kernel"] = tc.he_normal(rng, (din, dout), din, dtype)
        self.params["bias"] = np.zeros(dout, dtype)

    def output_shape(self, shape):
        return (shape[0], self.params["kernel"].shape[1])

    def forward(self, x, mode):
        out, cache = tc.dense(x, self.params["kernel"], self.params["bias"])
        self.cache = cache if mode == "train" else None
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = tc.dense_backward(self._take_cache(), dout)
        return dx


class Softmax(Layer):
    """Output head; its gradient is folded into the loss junction."""

    kind = "softmax"

    def forward(self, x, mode):
        return tc.softmax(x)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class SequentialModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config.validate()
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = []
        self._output = None
        self._build()

    def _build(self):
        cfg, dt = self.config, self.dtype
        rng = np.random.default_rng(self.seed)
        cin = cfg.input_channels
        for i, width in enumerate(cfg.widths, start=1):
            stage = i - 1
            self.layers.append(Conv2D(f"conv{i}", cin, width, rng, dt))
            act, norm = ReLU(f"relu{i}"), BatchNorm(f"bn{i}", width, dt)
            self.layers += [act, norm] if cfg.order == "relu_bn" else [norm, act]
            if stage in cfg.se_stages:
                self.layers.append(SEBlock(f"se{i}", width, cfg.ratio, rng, dt))
            self.layers.append(MaxPool(f"pool{i}"))
            cin = width
        self.layers += [
            Flatten("flatten"),
            Dense("dense", cfg.flatten_width, cfg.dense_units, rng, dt),
            ReLU("dense_relu"),
            Dense("head", cfg.dense_units, cfg.num_classes, rng, dt),
            Softmax("softmax"),
        ]

    def fresh(self) -> "SequentialModel":
        """A new model with this model's configuration and initial weights."""
        return SequentialModel(self.config, self.seed, self.dtype)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.input_size, c.input_size, c.input_channels)

    # registry -------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed ``"<layer>.<param>"``."""
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.params.items()}

    def state(self) -> dict[str, np.ndarray]:
        """Every stored tensor, trainable or not, in archive order."""
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.state().items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": l.grads[k] for l in self.layers for k in l.params}

    def param_count(self) -> int:
        return sum(v.size for v in self.state().values())

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(v.shape)) for name, v in self.state().items()]

    def serialized_size_bytes(self) -> int:
        return len(_encode_header(self.manifest())) + 4 * self.param_count()

    def layer_table(self, batch: int = 1) -> list[tuple[str, str, tuple[int, ...], int]]:
        """``(name, kind, output shape, stored parameter count)`` per layer."""
        shape = (batch,) + self.input_shape
        rows = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            rows.append((layer.name, layer.kind, shape, sum(v.size for v in layer.state().values())))
        return rows

    # compute --------------------------------------------------------------

    def forward(self, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
        """Class probabilities, shape (N, num_classes).

        ``"train"`` uses batch statistics and keeps caches for :meth:`backprop`;
        ``"infer"`` uses running statistics and keeps nothing.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        if batch.ndim != 4 or batch.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects (N, {', '.join(map(str, self.input_shape))}) "
                             f"input, got {batch.shape}")
        x = batch.astype(self.dtype, copy=False)
        for layer in self.layers:
            x = layer.forward(x, mode)
        self._output = x if mode == "train" else None
        return x

    def backprop(self, probabilities: np.ndarray, one_hot: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of mean categorical cross-entropy for every trainable tensor."""
        if self._output is None or probabilities is not self._output:
            raise StaleCacheError("backprop needs the output of the latest train-mode forward")
        if one_hot.shape != probabilities.shape:
            raise ShapeError(f"labels shape {one_hot.shape} != probabilities {probabilities.shape}")
        self._output = None
        grad = (probabilities - one_hot.astype(self.dtype, copy=False)) / probabilities.shape[0]
        for layer in reversed(self.layers[:-1]):
            grad = layer.backward(grad)
        return self.gradients()


def build_scaled_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SequentialModel:
    return SequentialModel(config, seed, dtype)


def build_reference_model(seed: int = 0, dtype=np.float32) -> SequentialModel:
    return SequentialModel(REFERENCE_CONFIG, seed, dtype)


def build_baseline_model(seed: int = 0, dtype=np.float32, config: ModelConfig = REFERENCE_CONFIG) -> SequentialModel:
    return SequentialModel(config.without_se(), seed, dtype)


# --------------------------------------------------------------------------
# weight archive
# --------------------------------------------------------------------------

ARCHIVE_MAGIC = b"SEW1"
ARCHIVE_VERSION = 1


@dataclass
class WeightArchive:
    manifest: list[tuple[str, tuple[int, ...]]]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.manifest)


def _encode_header(manifest) -> bytes:
    parts = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(manifest))]
    for name, shape in manifest:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
    return b"".join(parts)


def save_weights(model: SequentialModel, path) -> None:
    state = model.state()
    with open(path, "wb") as fh:
        fh.write(_encode_header(model.manifest()))
        for tensor in state.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def read_archive(path) -> WeightArchive:
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: not a weight archive (magic {data[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != ARCHIVE_VERSION:
            raise FormatError(f"{path}: unsupported archive version {version}")
        pos = 12
        manifest = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise struct.error("short name")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            manifest.append((name, tuple(shape)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptionError(f"{path}: truncated or malformed archive header ({exc})") from None
    archive = WeightArchive(manifest)
    expected = 4 * archive.count
    if len(data) - pos != expected:
        raise CorruptionError(
            f"{path}: payload is {len(data) - pos} bytes, manifest requires {expected}"
        )
    for name, shape in manifest:
        size = int(np.prod(shape))
        archive.tensors[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape)
        pos += 4 * size
    return archive


def load_weights(model: SequentialModel, path) -> WeightArchive:
    """Read an archive and copy its tensors into ``model`` in place."""
    archive = read_archive(path)
    expected = model.manifest()
    if archive.manifest != expected:
        ours = dict(expected)
        diffs = [f"{n}: archive {s} vs model {ours.get(n)}" for n, s in archive.manifest if ours.get(n) != s]
        missing = [n for n in ours if n not in dict(archive.manifest)]
        detail = "; ".join(diffs[:3] + [f"missing {n}" for n in missing[:3]]) or "tensor order differs"
        raise IncompatibleArchiveError(f"{path}: archive does not match model ({detail})")
    for name, tensor in model.state().items():
        tensor[...] = archive.tensors[name]
    return archive
