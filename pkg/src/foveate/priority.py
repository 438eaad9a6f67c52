"""Class-contingent priority maps.

Feature channels are computed per stimulus: a center-surround contrast
channel (difference of 7x7 truncated Gaussians, sigma 1 vs 3) and an
orientation channel (max over four directional second-derivative
filters). Channel maps are pooled onto the 7x7 fixation grid (4x4 pixel
cells) and quantized into 5 levels; per-class averages of these maps
form the atlas that populates the feature likelihoods of the discrete
model.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

CHANNELS = ("contrast", "orientation")
GRID = 7
CELL_PX = 4
N_LEVELS = 5

ATLAS_MAGIC = b"PATL"
ATLAS_VERSION = 1


class AtlasFormatError(ValueError):
    """Raised on malformed atlas files."""


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W) in [0, 1]

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class PriorityAtlas:
    levels: np.ndarray  # (classes, channels, 7, 7) u8 in 1..N_LEVELS
    channels: tuple = CHANNELS

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.uint8)
        if self.levels.ndim != 4:
            raise AtlasFormatError(f"atlas must be 4-d, got shape {self.levels.shape}")
        if self.levels.min() < 1 or self.levels.max() > N_LEVELS:
            raise AtlasFormatError("atlas levels out of range")

    @property
    def n_classes(self) -> int:
        return self.levels.shape[0]

    @property
    def n_channels(self) -> int:
        return self.levels.shape[1]


def _gaussian_kernel(sigma: float, size: int = 7) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    xx, yy = np.meshgrid(ax, ax)
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return k / k.sum()


def _oriented_kernel(theta_deg: float, sigma: float = 1.2, size: int = 7) -> np.ndarray:
    """Second derivative of a Gaussian along the axis at theta."""
    ax = np.arange(size) - (size - 1) / 2.0
    xx, yy = np.meshgrid(ax, ax)
    th = np.deg2rad(theta_deg)
    u = xx * np.cos(th) + yy * np.sin(th)
    g = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    k = (u**2 - sigma**2) / sigma**4 * g
    return k - k.mean()  # zero response to constant input


_DOG_CENTER = _gaussian_kernel(1.0)
_DOG_SURROUND = _gaussian_kernel(3.0)
_ORIENTED = [_oriented_kernel(t) for t in (0.0, 45.0, 90.0, 135.0)]


def _max_normalize(v: np.ndarray) -> np.ndarray:
    peak = v.max()
    if peak < 1e-9:  # numerically zero response, not structure
        return np.zeros_like(v)
    return v / peak


def saliency(image: np.ndarray) -> dict:
    """Per-channel saliency maps for one 28x28 stimulus in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (28, 28):
        raise ValueError(f"expected 28x28 image, got {image.shape}")
    center = convolve(image, _DOG_CENTER, mode="nearest")
    surround = convolve(image, _DOG_SURROUND, mode="nearest")
    contrast = _max_normalize(np.abs(center - surround))
    responses = [np.abs(convolve(image, k, mode="nearest")) for k in _ORIENTED]
    orientation = _max_normalize(np.max(responses, axis=0))
    return {"contrast": SaliencyMap(contrast), "orientation": SaliencyMap(orientation)}


def pool_to_grid(values: np.ndarray) -> np.ndarray:
    """Average-pool a 28x28 map into the 7x7 grid of 4x4 cells."""
    v = np.asarray(values, dtype=np.float64)
    return v.reshape(GRID, CELL_PX, GRID, CELL_PX).mean(axis=(1, 3))


def quantize(value: float, levels: int = N_LEVELS) -> int:
    """Uniform-bin level in 1..levels; [0, 0.2) -> 1, ..., [0.8, 1] -> levels."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"value {value} outside [0, 1]")
    return min(int(value * levels) + 1, levels)


def grid_levels(image: np.ndarray) -> np.ndarray:
    """Quantized per-channel 7x7 levels of one stimulus (channels, 7, 7)."""
    maps = saliency(image)
    out = np.empty((len(CHANNELS), GRID, GRID), dtype=np.uint8)
    for ci, name in enumerate(CHANNELS):
        pooled = pool_to_grid(maps[name].values)
        out[ci] = np.vectorize(quantize)(pooled)
    return out


def build_atlas(class_exemplars: dict, channels: tuple = CHANNELS) -> PriorityAtlas:
    """Atlas of quantized class-mean feature levels.

    class_exemplars maps digit -> (N, 28, 28) array; each class needs at
    least 100 exemplars. Saliency is averaged over exemplars before
    pooling and quantization.
    """
    n_classes = 10
    levels = np.zeros((n_classes, len(channels), GRID, GRID), dtype=np.uint8)
    for d in range(n_classes):
        if d not in class_exemplars:
            raise ValueError(f"missing class {d}")
        imgs = np.asarray(class_exemplars[d], dtype=np.float64)
        if imgs.max() > 1.0:
            imgs = imgs / 255.0
        if len(imgs) < 100:
            raise ValueError(f"class {d}: need >=100 exemplars, got {len(imgs)}")
        acc = {name: np.zeros((28, 28)) for name in channels}
        for img in imgs:
            maps = saliency(img)
            for name in channels:
                acc[name] += maps[name].values
        for ci, name in enumerate(channels):
            pooled = pool_to_grid(acc[name] / len(imgs))
            levels[d, ci] = np.vectorize(quantize)(pooled)
    return PriorityAtlas(levels=levels, channels=tuple(channels))


# ---------------------------------------------------------------------------
# Serialization: magic "PATL", u32 version, u32 classes/channels/rows/cols,
# u8 level count, u8 payload; little-endian.
# ---------------------------------------------------------------------------

def save_atlas(path, atlas: PriorityAtlas) -> None:
    c, ch, r, co = atlas.levels.shape
    with open(path, "wb") as f:
        f.write(ATLAS_MAGIC)
        f.write(struct.pack("<IIIIIB", ATLAS_VERSION, c, ch, r, co, N_LEVELS))
        f.write(atlas.levels.tobytes())


def load_atlas(path) -> PriorityAtlas:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != ATLAS_MAGIC:
            raise AtlasFormatError(f"bad atlas magic {magic!r}")
        header = f.read(21)
        if len(header) != 21:
            raise AtlasFormatError("truncated atlas header")
        version, c, ch, r, co, n_levels = struct.unpack("<IIIIIB", header)
        if version != ATLAS_VERSION:
            raise AtlasFormatError(f"unsupported atlas version {version}")
        if n_levels != N_LEVELS:
            raise AtlasFormatError(f"unsupported level count {n_levels}")
        payload = f.read(c * ch * r * co)
        if len(payload) != c * ch * r * co:
            raise AtlasFormatError("truncated atlas payload")
    levels = np.frombuffer(payload, dtype=np.uint8).reshape(c, ch, r, co)
    return PriorityAtlas(levels=levels.copy())
