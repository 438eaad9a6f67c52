"""Digit dataset: IDX container parsing and the bundled stimulus corpus.

Stimuli are 28x28 grayscale digits stored in the classic IDX layout
(big-endian u32 magic 0x00000803 / 0x00000801, dimension sizes, raw u8
payload). The corpus itself is generated procedurally: each class is a
set of strokes rendered with a Gaussian brush under a randomized affine
(rotation, anisotropic scale, shear, translation) plus low-frequency
wobble, all drawn from a seeded Philox stream. Generation is
deterministic, so every checkout reproduces the same files.

The dataset directory is resolved from FOVEATE_DATA_DIR (defaulting to
./data) and populated on first use.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

DEFAULT_SEED = 20240301
DEFAULT_N_TRAIN = 8000
DEFAULT_N_TEST = 2000


class IdxFormatError(ValueError):
    """Raised on malformed IDX containers."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, 28, 28) u8
    labels: np.ndarray  # (N,) u8, values 0..9
    split: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IdxFormatError(
                f"image/label count mismatch: {len(self.images)} vs {len(self.labels)}"
            )

    def __len__(self) -> int:
        return len(self.images)

    def image_float(self, i: int) -> np.ndarray:
        """Stimulus i as float64 in [0, 1]."""
        return self.images[i].astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"truncated file while reading {what}")
    return buf


def load_idx_images(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}")
        payload = _read_exact(f, n * rows * cols, "image payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, n = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}")
        payload = _read_exact(f, n, "label payload")
    return np.frombuffer(payload, dtype=np.uint8)


def load_mnist(images_path, labels_path, split: str = "unknown") -> Dataset:
    """Parse an IDX image/label pair and validate count agreement."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[1:] != (28, 28):
        raise IdxFormatError(f"expected 28x28 images, got {images.shape[1:]}")
    return Dataset(images=images, labels=labels, split=split)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Procedural corpus
# ---------------------------------------------------------------------------

def _arc(cx, cy, rx, ry, a0, a1, n=48):
    t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(x0, y0, x1, y1, n=24):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * np.array([x0, y0]) + t * np.array([x1, y1])


def _glyph_strokes(digit: int) -> list:
    """Stroke polylines for one digit class, unit box, y down."""
    if digit == 0:
        return [_arc(0.5, 0.5, 0.21, 0.31, 0, 2 * np.pi, 72)]
    if digit == 1:
        return [_line(0.40, 0.30, 0.56, 0.14), _line(0.56, 0.14, 0.56, 0.86)]
    if digit == 2:
        return [
            _arc(0.5, 0.32, 0.19, 0.16, np.pi, 2 * np.pi, 36),
            _line(0.69, 0.32, 0.31, 0.80),
            _line(0.31, 0.80, 0.72, 0.80),
        ]
    if digit == 3:
        return [
            _arc(0.47, 0.32, 0.18, 0.15, -0.75 * np.pi, 0.5 * np.pi, 40),
            _arc(0.47, 0.64, 0.20, 0.17, -0.5 * np.pi, 0.75 * np.pi, 40),
        ]
    if digit == 4:
        return [
            _line(0.62, 0.12, 0.28, 0.58),
            _line(0.28, 0.58, 0.78, 0.58),
            _line(0.62, 0.12, 0.62, 0.88),
        ]
    if digit == 5:
        return [
            _line(0.68, 0.15, 0.34, 0.15),
            _line(0.34, 0.15, 0.33, 0.47),
            _arc(0.49, 0.63, 0.19, 0.18, -0.55 * np.pi, 0.8 * np.pi, 44),
        ]
    if digit == 6:
        return [
            _arc(0.62, 0.40, 0.30, 0.30, 0.75 * np.pi, 1.25 * np.pi, 28),
            _arc(0.50, 0.65, 0.17, 0.17, 0, 2 * np.pi, 56),
        ]
    if digit == 7:
        return [_line(0.30, 0.17, 0.72, 0.17), _line(0.72, 0.17, 0.42, 0.86)]
    if digit == 8:
        return [
            _arc(0.5, 0.32, 0.15, 0.15, 0, 2 * np.pi, 52),
            _arc(0.5, 0.66, 0.19, 0.18, 0, 2 * np.pi, 56),
        ]
    if digit == 9:
        return [
            _arc(0.52, 0.34, 0.17, 0.17, 0, 2 * np.pi, 52),
            _line(0.69, 0.34, 0.62, 0.86),
        ]
    raise ValueError(f"no glyph for digit {digit}")


_PIX = np.stack(
    np.meshgrid(np.arange(28, dtype=np.float64), np.arange(28, dtype=np.float64), indexing="xy"),
    axis=-1,
).reshape(-1, 2)  # (784, 2) pixel centers, (x, y)


def render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    """One randomized 28x28 u8 exemplar of `digit`."""
    pts = np.concatenate(_glyph_strokes(digit), axis=0) - 0.5

    # low-frequency wobble along the path
    n = len(pts)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    amp = rng.normal(0.0, 0.010, size=2)
    idx = np.linspace(0, 2 * np.pi, n)
    pts = pts + np.stack([amp[0] * np.sin(2 * idx + phase[0]), amp[1] * np.sin(3 * idx + phase[1])], axis=1)

    rot = rng.normal(0.0, np.deg2rad(6.0))
    scale = np.exp(rng.normal(0.0, 0.06, size=2))
    shear = rng.normal(0.0, 0.06)
    c, s = np.cos(rot), np.sin(rot)
    A = np.array([[c, -s], [s, c]]) @ np.array([[scale[0], shear * scale[0]], [0.0, scale[1]]])
    pts = pts @ A.T + 0.5

    shift = rng.normal(0.0, 0.7, size=2)  # pixels
    xy = pts * 24.0 + 2.0  # unit box -> 24px box with 2px margin
    xy = xy + shift

    # densify segments so brush splats overlap
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    dense = [xy[:1]]
    for i, d in enumerate(seg):
        if d > 2.5:  # glyph joins between strokes; do not connect
            dense.append(xy[i + 1 : i + 2])
            continue
        k = max(int(d / 0.35), 1)
        t = np.linspace(0, 1, k + 1)[1:, None]
        dense.append((1 - t) * xy[i] + t * xy[i + 1])
    xy = np.concatenate(dense, axis=0)

    sigma = np.exp(rng.normal(np.log(0.80), 0.12))
    d2 = cdist(_PIX, xy, "sqeuclidean").min(axis=1)
    img = np.exp(-d2 / (2.0 * sigma * sigma)).reshape(28, 28)
    img *= rng.uniform(0.88, 1.0)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate_corpus(out_dir, seed: int = DEFAULT_SEED,
                    n_train: int = DEFAULT_N_TRAIN, n_test: int = DEFAULT_N_TEST) -> None:
    """Render the full corpus and write the four IDX files into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split_key, (split, n, img_name, lab_name) in enumerate((
        ("train", n_train, TRAIN_IMAGES, TRAIN_LABELS),
        ("test", n_test, TEST_IMAGES, TEST_LABELS),
    )):
        rng = np.random.Generator(np.random.Philox(key=[seed, split_key]))
        labels = np.tile(np.arange(10, dtype=np.uint8), n // 10 + 1)[:n]
        images = np.stack([render_digit(int(d), rng) for d in labels])
        write_idx_images(out_dir / img_name, images)
        write_idx_labels(out_dir / lab_name, labels)


def data_dir() -> Path:
    return Path(os.environ.get("FOVEATE_DATA_DIR", "data"))


def ensure_dataset(root=None) -> tuple[Dataset, Dataset]:
    """Load (train, test), generating the corpus first if absent."""
    root = Path(root) if root is not None else data_dir()
    needed = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
    if not all((root / name).exists() for name in needed):
        generate_corpus(root)
    train = load_mnist(root / TRAIN_IMAGES, root / TRAIN_LABELS, split="train")
    test = load_mnist(root / TEST_IMAGES, root / TEST_LABELS, split="test")
    return train, test
