"""Image datasets: IDX and raw loaders, YCoCg color transforms, splits and bits-per-dimension."""
from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed, truncated or out-of-range dataset file."""


class ColorTransform(str, Enum):
    IDENTITY = "identity"
    YCOCG_R = "ycocg_r"
    YCOCG_LOSSY = "ycocg_lossy"


@dataclass(frozen=True, eq=False)
class ImageDataset:
    """Immutable store of ``count`` images, flattened row-major as ``(i*W + j)*C + c``.

    Attributes
    ----------
    pixels : ndarray of uint8, shape (count, H*W*C)
    height, width, channels : int
    categories : int
        Number of values per pixel, ``P``; every pixel is ``< P``.
    transform : str
        Color transform already applied to ``pixels``.
    """

    pixels: np.ndarray
    height: int
    width: int
    channels: int = 1
    categories: int = 256
    transform: str = ColorTransform.IDENTITY.value
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2:
            px = px.reshape(len(px), -1)
        D = self.height * self.width * self.channels
        if min(self.height, self.width, self.channels) < 1:
            raise DataError("image dimensions must be positive")
        if px.shape[1] != D:
            raise DataError(f"expected {D} values per image, got {px.shape[1]}")
        if not 1 <= self.categories <= 256:
            raise DataError(f"categories must be in [1, 256], got {self.categories}")
        if px.size and int(px.max()) >= self.categories:
            bad = int(np.argmax(px.reshape(-1) >= self.categories))
            raise DataError(f"value {int(px.reshape(-1)[bad])} at flat index {bad} is >= P={self.categories}")
        ColorTransform(self.transform)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other):
        if not isinstance(other, ImageDataset):
            return NotImplemented
        return self.header() == other.header() and np.array_equal(self.pixels, other.pixels)

    __hash__ = None

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    @property
    def num_vars(self) -> int:
        return self.pixels.shape[1]

    def __len__(self) -> int:
        return self.count

    def images(self) -> np.ndarray:
        """``(count, H, W, C)`` view of the pixels."""
        return self.pixels.reshape(self.count, self.height, self.width, self.channels)

    def header(self) -> dict:
        return {"count": self.count, "H": self.height, "W": self.width, "C": self.channels,
                "P": self.categories, "transform": self.transform}

    def subset(self, index) -> "ImageDataset":
        return ImageDataset(self.pixels[np.asarray(index)], self.height, self.width, self.channels,
                            self.categories, self.transform)


# color transforms

def _check_rgb(rgb) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.shape[-1:] != (3,):
        raise ValueError(f"expected a trailing axis of 3 channels, got shape {rgb.shape}")
    if rgb.size and (rgb.min() < 0 or rgb.max() > 255):
        raise ValueError("channel values must lie in [0, 256)")
    return rgb.astype(np.int64)


def _forward_lift(x, y):
    diff = (y - x) % 256
    average = (x + (diff >> 1)) % 256
    return average, diff


def _reverse_lift(average, diff):
    x = (average - (diff >> 1)) % 256
    y = (x + diff) % 256
    return x, y


def ycocg_r(rgb) -> np.ndarray:
    """Lossless YCoCg-R with mod-256 lifting; output channels are ``(y, co, cg)``."""
    rgb = _check_rgb(rgb)
    temp, co = _forward_lift(rgb[..., 0], rgb[..., 2])
    y, cg = _forward_lift(rgb[..., 1], temp)
    return np.stack([y, co, cg], axis=-1)


def ycocg_r_inverse(ycc) -> np.ndarray:
    ycc = _check_rgb(ycc)
    green, temp = _reverse_lift(ycc[..., 0], ycc[..., 2])
    red, blue = _reverse_lift(temp, ycc[..., 1])
    return np.stack([red, green, blue], axis=-1)


def ycocg_lossy(rgb) -> np.ndarray:
    """Floating-point YCoCg with floor quantization to [0, 255]; not invertible.

    Arithmetic is single precision, as in the reference implementation; the
    floor quantization makes the roundtrip error depend on it (about 0.66 mean
    absolute error in float32 against about 0.51 in float64).
    """
    rgb = _check_rgb(rgb)
    deq = rgb.astype(np.float32) / np.float32(127.5) - np.float32(1)
    red, green, blue = ((deq[..., c] + 1) / 2 for c in range(3))
    co = red - blue
    tmp = blue + co / 2
    cg = green - tmp
    y = tmp + cg / 2
    y = y * 2 - 1
    out = np.stack([y, co, cg], axis=-1)
    return np.clip(np.floor((out + 1) / 2 * 256).astype(np.int64), 0, 255)


def ycocg_lossy_inverse(ycc) -> np.ndarray:
    ycc = _check_rgb(ycc)
    deq = ycc.astype(np.float32) / np.float32(127.5) - np.float32(1)
    y, co, cg = deq[..., 0], deq[..., 1], deq[..., 2]
    y = (y + 1) / 2
    tmp = y - cg / 2
    green = cg + tmp
    blue = tmp - co / 2
    red = blue + co
    out = np.stack([red, green, blue], axis=-1)
    return np.clip(np.floor(out * 255).astype(np.int64), 0, 255)


_FORWARD = {ColorTransform.YCOCG_R: ycocg_r, ColorTransform.YCOCG_LOSSY: ycocg_lossy}


def apply_transform(ds: ImageDataset, kind: str | ColorTransform) -> ImageDataset:
    """Return a transformed copy; refuses to stack a transform on already-transformed data."""
    kind = ColorTransform(kind)
    if kind is ColorTransform.IDENTITY:
        return ds
    if ds.transform != ColorTransform.IDENTITY.value:
        raise DataError(f"dataset already carries transform {ds.transform!r}")
    if ds.channels != 3:
        raise DataError(f"color transforms need 3 channels, dataset has {ds.channels}")
    if ds.categories != 256:
        raise DataError("color transforms need 8-bit pixels (P=256)")
    out = _FORWARD[kind](ds.images()).astype(np.uint8)
    return ImageDataset(out.reshape(ds.count, -1), ds.height, ds.width, 3, 256, kind.value)


# file formats

_IDX_UBYTE = 0x08


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path) -> ImageDataset:
    """Unsigned-byte IDX file (optionally gzipped) with 1 to 4 dimensions ``N[, H, W[, C]]``."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header, expected at least 4 bytes, got {len(raw)}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] != _IDX_UBYTE or not 1 <= raw[3] <= 4:
        raise DataError(f"{path}: bad IDX magic 0x{raw[:4].hex()}, expected 0x0000080N with N in 1..4")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{path}: truncated header, expected {head} bytes, got {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = head + math.prod(dims)
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise DataError(f"{path}: {kind} file, expected {expected} bytes, got {len(raw)}")
    dims += [1] * (4 - ndim)
    n, h, w, c = dims
    px = np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(n, h * w * c)
    return ImageDataset(px, h, w, c, 256)


def save_idx(ds: ImageDataset, path) -> None:
    dims = [ds.count, ds.height, ds.width] + ([ds.channels] if ds.channels > 1 else [])
    head = bytes([0, 0, _IDX_UBYTE, len(dims)]) + b"".join(d.to_bytes(4, "big") for d in dims)
    Path(path).write_bytes(head + ds.pixels.tobytes())


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_raw(path) -> ImageDataset:
    """Headerless uint8 pixels described by the JSON sidecar ``<path>.json``."""
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"raw dataset header not found: {side}")
    try:
        hdr = json.loads(side.read_text())
        n, h, w, c, p = (int(hdr[k]) for k in ("count", "H", "W", "C", "P"))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{side}: invalid header ({exc})") from exc
    raw = _read_bytes(path)
    expected = n * h * w * c
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise DataError(f"{path}: {kind} file, expected {expected} bytes, got {len(raw)}")
    px = np.frombuffer(raw, dtype=np.uint8).reshape(n, h * w * c)
    return ImageDataset(px, h, w, c, p, hdr.get("transform", ColorTransform.IDENTITY.value))


def save_raw(ds: ImageDataset, path) -> None:
    path = Path(path)
    path.write_bytes(ds.pixels.tobytes())
    _sidecar(path).write_text(json.dumps(ds.header(), indent=1, sort_keys=True) + "\n")


FORMATS = {"idx": load_idx, "raw": load_raw}


def load(path, format: str = "idx") -> ImageDataset:
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {sorted(FORMATS)}")
    return FORMATS[format](path)


def save(ds: ImageDataset, path, format: str = "raw") -> None:
    {"idx": save_idx, "raw": save_raw}[format](ds, path)


# splitting and batching

@dataclass(frozen=True)
class Split:
    train: ImageDataset
    valid: ImageDataset
    seed: int
    valid_fraction: float

    def info(self) -> dict:
        return {"seed": self.seed, "valid_fraction": self.valid_fraction,
                "n_train": self.train.count, "n_valid": self.valid.count}


def train_valid_split(ds: ImageDataset, valid_fraction: float = 0.05, seed: int = 0) -> Split:
    """Shuffle with ``seed`` and hold out the last ``valid_fraction`` of the images."""
    if not 0 < valid_fraction < 1:
        raise ValueError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    if ds.count < 2:
        raise DataError("need at least two images to split")
    perm = np.random.default_rng(seed).permutation(ds.count)
    n_valid = min(max(1, round(ds.count * valid_fraction)), ds.count - 1)
    return Split(ds.subset(perm[:-n_valid]), ds.subset(perm[-n_valid:]), seed, valid_fraction)


def batches(x: np.ndarray, batch_size: int, rng: np.random.Generator | None = None):
    """Yield consecutive row blocks of ``x``, shuffled first when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(x)) if rng is not None else np.arange(len(x))
    for start in range(0, len(x), batch_size):
        yield x[order[start:start + batch_size]]


def bpd(mean_nll: float, D: int) -> float:
    """Bits per dimension of a mean negative log-likelihood in nats."""
    if D < 1:
        raise ValueError("D must be >= 1")
    return mean_nll / (D * math.log(2))


def synthetic_mixture(n: int, height: int = 4, width: int = 4, components: int = 3, seed: int = 0,
                      mixture_seed: int = 1234) -> ImageDataset:
    """Binary images sampled from a fixed mixture of product-of-Bernoulli components."""
    D = height * width
    mrng = np.random.default_rng(mixture_seed)
    probs = np.clip(mrng.beta(0.4, 0.4, size=(components, D)), 0.05, 0.95)
    weights = mrng.dirichlet(np.full(components, 5.0))
    rng = np.random.default_rng(seed)
    z = rng.choice(components, size=n, p=weights)
    px = (rng.random((n, D)) < probs[z]).astype(np.uint8)
    return ImageDataset(px, height, width, 1, 2)
