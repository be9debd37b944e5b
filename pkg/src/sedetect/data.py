"""Image ingestion, the SEDF dataset container, and a synthetic two-class set.

Labels follow the detector convention: fake = 0, real = 1.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, CorruptionError, FormatError, IngestionError, LabelError, ShapeError

log = logging.getLogger(__name__)

CLASS_NAMES = ("fake", "real")
CONTAINER_MAGIC = b"SEDF"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class DatasetContainer:
    images: np.ndarray  # (N, S, S, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) uint8 in {0, 1}
    size: int
    provenance: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        n = self.labels.shape[0]
        if self.images.shape != (n, self.size, self.size, 3):
            raise ShapeError(
                f"images shape {self.images.shape} does not match {n} labels at side {self.size}"
            )
        if n and not (self.images.min() >= 0 and self.images.max() <= 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if np.any(self.labels > 1):
            raise LabelError("labels must be 0 (fake) or 1 (real)")

    def __len__(self):
        return int(self.labels.shape[0])

    def class_counts(self) -> tuple[int, int]:
        return int((self.labels == 0).sum()), int((self.labels == 1).sum())

    def subset(self, indices) -> "DatasetContainer":
        return DatasetContainer(self.images[indices], self.labels[indices], self.size, self.provenance)


# --------------------------------------------------------------------------
# container file
# --------------------------------------------------------------------------

def encode_container(ds: DatasetContainer) -> bytes:
    payload = ds.images.astype("<f4", copy=False).tobytes() + ds.labels.tobytes()
    header = _HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(ds), ds.size, 3)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def write_container(ds: DatasetContainer, path) -> None:
    Path(path).write_bytes(encode_container(ds))


def read_container(path) -> DatasetContainer:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != CONTAINER_MAGIC:
        raise FormatError(f"{path}: not a dataset container (magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, version, n, size, channels = _HEADER.unpack_from(data)
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    if channels != 3:
        raise FormatError(f"{path}: expected 3 channels, header says {channels}")
    pixels = n * size * size * 3
    expected = _HEADER.size + 4 * pixels + n + 4
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: file is {len(data)} bytes, header (N={n}, S={size}) requires {expected}"
        )
    payload = data[_HEADER.size:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptionError(f"{path}: CRC32 mismatch")
    images = np.frombuffer(payload, "<f4", pixels).reshape(n, size, size, 3)
    labels = np.frombuffer(payload, np.uint8, n, 4 * pixels)
    try:
        return DatasetContainer(images.astype(np.float32), labels.copy(), size, f"read from {path}")
    except ValueError as exc:
        raise CorruptionError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def _axis_weights(src: int, dst: int):
    scale = src / dst
    pos = np.clip((np.arange(dst) + 0.5) * scale - 0.5, 0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array to (size, size, C).

    Sample centres sit at ``(i + 0.5) * scale - 0.5`` (no corner alignment)
    and are clamped to the source grid, so every output is a convex
    combination of input pixels.
    """
    if size < 1:
        raise ValueError(f"target size must be >= 1, got {size}")
    if image.ndim != 3:
        raise ShapeError(f"resize expects (H, W, C), got shape {image.shape}")
    img = np.asarray(image, dtype=np.float64)
    lo, hi, f = _axis_weights(img.shape[0], size)
    img = img[lo] * (1 - f)[:, None, None] + img[hi] * f[:, None, None]
    lo, hi, f = _axis_weights(img.shape[1], size)
    return img[:, lo] * (1 - f)[None, :, None] + img[:, hi] * f[None, :, None]


def load_image(path, size: int) -> np.ndarray:
    """Decode, resize to ``size`` and rescale bytes by 1/255 into [0, 1]."""
    with Image.open(path) as im:
        raw = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.clip(resize_bilinear(raw / 255.0, size), 0.0, 1.0).astype(np.float32)


def ingest_directory(root, size: int = 224) -> tuple[DatasetContainer, list[tuple[str, str]]]:
    """Read ``root/fake`` and ``root/real`` into a container.

    Undecodable files are skipped and returned as ``(path, reason)`` pairs.
    """
    root = Path(root)
    images, labels, skipped = [], [], []
    for label, name in enumerate(CLASS_NAMES):
        sub = root / name
        if not sub.is_dir():
            raise IngestionError(f"missing class directory {sub}")
        kept = 0
        for path in sorted(p for p in sub.iterdir() if p.is_file()):
            try:
                images.append(load_image(path, size))
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                skipped.append((str(path), str(exc) or type(exc).__name__))
                log.warning("skipping %s: %s", path, exc)
                continue
            labels.append(label)
            kept += 1
        if kept == 0:
            raise IngestionError(f"class directory {sub} has no decodable images")
    ds = DatasetContainer(np.stack(images), np.array(labels), size, f"ingested from {root}")
    return ds, skipped


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Class 0: smooth low-frequency fields. Class 1: stripe/checker textures
    with a period of ``periods`` pixels. Both get uniform noise."""

    count: int
    size: int = 32
    seed: int = 0
    smooth_cycles: tuple[float, float] = (0.5, 1.5)   # cycles per image, class 0
    periods: tuple[int, ...] = (2, 3, 4)             # pixels per cycle, class 1
    amplitude: tuple[float, float] = (0.15, 0.3)
    noise: float = 0.04

    def validate(self) -> "SyntheticSpec":
        if self.count < 0 or self.count % 2:
            raise ConfigError(f"count must be even so classes balance, got {self.count}")
        if self.size < 4:
            raise ConfigError(f"size must be >= 4, got {self.size}")
        lo, hi = self.amplitude
        if not 0 < lo <= hi:
            raise ConfigError(f"amplitude range {self.amplitude} is invalid")
        if not 0 <= self.noise < lo:
            raise ConfigError(f"noise {self.noise} must be below the minimum amplitude {lo}")
        if not self.periods or min(self.periods) < 2:
            raise ConfigError("periods must be integers >= 2")
        if self.smooth_cycles[1] * 4 > self.size:
            raise ConfigError("smooth_cycles too high for the image size")
        return self


def _smooth_field(rng, spec, yy, xx):
    s = spec.size
    theta = rng.uniform(0, 2 * np.pi)
    cycles = rng.uniform(*spec.smooth_cycles)
    amp = rng.uniform(*spec.amplitude)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    wave = amp * np.cos(2 * np.pi * cycles * u / s + rng.uniform(0, 2 * np.pi))
    ramp = rng.uniform(-0.1, 0.1) * (u / s - 0.5)
    return wave + ramp


def _texture_field(rng, spec, yy, xx):
    period = int(rng.choice(spec.periods))
    amp = rng.uniform(*spec.amplitude)
    shift = rng.integers(period)
    kind = rng.integers(3)
    wx = np.cos(2 * np.pi * (xx + shift) / period)
    wy = np.cos(2 * np.pi * (yy + shift) / period)
    if kind == 0:
        return amp * wx
    if kind == 1:
        return amp * wy
    return amp * wx * wy


def generate_synthetic(spec: SyntheticSpec) -> DatasetContainer:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, s = spec.count, spec.size
    labels = rng.permutation(np.repeat(np.array([0, 1], np.uint8), n // 2))
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    images = np.empty((n, s, s, 3), np.float32)
    for i, label in enumerate(labels):
        field = _texture_field(rng, spec, yy, xx) if label else _smooth_field(rng, spec, yy, xx)
        base = rng.uniform(0.35, 0.65, size=3)
        gain = rng.uniform(0.7, 1.0, size=3)
        noise = rng.uniform(-spec.noise, spec.noise, size=(s, s, 3))
        images[i] = np.clip(base + field[..., None] * gain + noise, 0.0, 1.0)
    return DatasetContainer(images, labels, s, f"synthetic seed={spec.seed}")
