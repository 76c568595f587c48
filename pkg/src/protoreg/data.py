"""Seeded synthetic blob-counting dataset and its binary file format.

Each grade-g image (internal grades 1..G) carries exactly g*b dark circular
blobs on a bright noisy background, so the regression target is a monotone
function of visible content. Blobs are placed with a minimum separation so
a connected-component count recovers the grade exactly on noise-free
images.

File format (little-endian):
    magic  b"INSD1"
    u32 x 5: channels, height, width, count, label_mode (0 categorical,
             1 continuous)
    f64 images, count*channels*height*width values, row-major
    f64 internal labels, count values (continuous in continuous mode)
    f64 internal categorical grades, count values (reference copy)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np


class DataConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


MAGIC = b"INSD1"
LABEL_SHIFT = 1.0  # internal labels = reported grade + 1, keeping them positive

_BACKGROUND = 0.85
_BLOB_VALUE = 0.15
_PLACEMENT_TRIES = 300
_IMAGE_RESTARTS = 50


@dataclass(frozen=True)
class SynthConfig:
    image_hw: tuple[int, int] = (32, 32)
    channels: int = 3
    grades: int = 5
    train_per_grade: int = 100
    test_per_grade: int = 50
    blobs_per_grade: int = 2
    blob_radius: tuple[float, float] = (2.0, 3.0)
    noise_sigma: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.grades < 2:
            raise DataConfigError(f"need at least 2 grades, got {self.grades}")
        if self.blobs_per_grade < 1:
            raise DataConfigError("blobs_per_grade must be >= 1")
        if self.blob_radius[0] > self.blob_radius[1] or self.blob_radius[0] <= 0:
            raise DataConfigError(f"bad blob radius range {self.blob_radius}")
        if self.channels not in (1, 3):
            raise DataConfigError(f"channels must be 1 or 3, got {self.channels}")


@dataclass
class SynthDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0,1]
    y: np.ndarray  # (N,) internal labels (categorical grade or continuous)
    y_categorical: np.ndarray  # (N,) internal categorical grade, kept as reference
    label_mode: str  # "categorical" | "continuous"
    split: str

    def __len__(self):
        return self.images.shape[0]

    @property
    def y_reported(self) -> np.ndarray:
        return unshift_labels(self.y, LABEL_SHIFT)


def shift_labels(labels: np.ndarray, offset: float = LABEL_SHIFT) -> np.ndarray:
    return np.asarray(labels, dtype=np.float64) + offset


def unshift_labels(labels: np.ndarray, offset: float = LABEL_SHIFT) -> np.ndarray:
    return np.asarray(labels, dtype=np.float64) - offset


def _place_blobs(cfg: SynthConfig, n_blobs: int,
                 rng: np.random.Generator) -> list[tuple[float, float, float]] | None:
    h, w = cfg.image_hw
    placed: list[tuple[float, float, float]] = []
    for _ in range(n_blobs):
        for _attempt in range(_PLACEMENT_TRIES):
            r = rng.uniform(*cfg.blob_radius)
            cy = rng.uniform(r, h - 1 - r)
            cx = rng.uniform(r, w - 1 - r)
            # keep blobs from touching so component counting stays exact
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 2.0) ** 2
                   for py, px, pr in placed):
                placed.append((cy, cx, r))
                break
        else:
            return None  # greedy placement painted itself into a corner
    return placed


def _draw_image(cfg: SynthConfig, n_blobs: int, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.image_hw
    img = np.full((h, w), _BACKGROUND)
    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=(h, w))
    for _restart in range(_IMAGE_RESTARTS):
        placed = _place_blobs(cfg, n_blobs, rng)
        if placed is not None:
            break
    else:
        raise DataConfigError(
            f"could not place {n_blobs} non-touching blobs of radius "
            f"{cfg.blob_radius} in a {h}x{w} image"
        )
    yy, xx = np.mgrid[0:h, 0:w]
    for cy, cx, r in placed:
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = _BLOB_VALUE
    np.clip(img, 0.0, 1.0, out=img)
    return np.repeat(img[None, :, :], cfg.channels, axis=0)


def generate(cfg: SynthConfig, per_grade: int, split: str, seed: int) -> SynthDataset:
    """Balanced dataset: per_grade images of every internal grade 1..grades."""
    rng = np.random.default_rng(seed)
    images, grades = [], []
    for g in range(1, cfg.grades + 1):
        for _ in range(per_grade):
            images.append(_draw_image(cfg, g * cfg.blobs_per_grade, rng))
            grades.append(float(g))
    y = np.array(grades)
    return SynthDataset(
        images=np.stack(images),
        y=y,
        y_categorical=y.copy(),
        label_mode="categorical",
        split=split,
    )


def make_splits(cfg: SynthConfig) -> tuple[SynthDataset, SynthDataset]:
    train = generate(cfg, cfg.train_per_grade, "train", cfg.seed)
    test = generate(cfg, cfg.test_per_grade, "test", cfg.seed + 1)
    return train, test


def continuous_labels(ds: SynthDataset, seed: int) -> SynthDataset:
    """Jitter each categorical grade c to a draw from U(c-0.5, c+0.5)."""
    if ds.label_mode != "categorical":
        raise DataConfigError("continuous_labels expects categorical input labels")
    rng = np.random.default_rng(seed)
    y = ds.y_categorical + rng.uniform(-0.5, 0.5, size=len(ds))
    return replace(ds, y=y, label_mode="continuous")


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation (0-360 deg) and scale (0.9-1.1), nearest-neighbor."""
    n, c, h, w = images.shape
    out = np.empty_like(images)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    for i in range(n):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        scale = rng.uniform(0.9, 1.1)
        cos_a, sin_a = np.cos(angle) / scale, np.sin(angle) / scale
        src_y = cos_a * (yy - cy) - sin_a * (xx - cx) + cy
        src_x = sin_a * (yy - cy) + cos_a * (xx - cx) + cx
        sy = np.clip(np.rint(src_y).astype(int), 0, h - 1)
        sx = np.clip(np.rint(src_x).astype(int), 0, w - 1)
        out[i] = images[i][:, sy, sx]
    return out


def save_dataset(ds: SynthDataset, path) -> None:
    n, c, h, w = ds.images.shape
    mode = 1 if ds.label_mode == "continuous" else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", c, h, w, n, mode))
        f.write(ds.images.astype("<f8").tobytes())
        f.write(ds.y.astype("<f8").tobytes())
        f.write(ds.y_categorical.astype("<f8").tobytes())


def load_dataset(path, split: str = "unknown") -> SynthDataset:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = f.read(20)
        if len(header) != 20:
            raise DataFormatError(f"{path}: truncated header")
        c, h, w, n, mode = struct.unpack("<5I", header)
        body = np.frombuffer(f.read(), dtype="<f8")
    expected = n * c * h * w + 2 * n
    if body.size != expected:
        raise DataFormatError(f"{path}: expected {expected} payload values, got {body.size}")
    images = body[: n * c * h * w].reshape(n, c, h, w).copy()
    y = body[n * c * h * w : n * c * h * w + n].copy()
    y_cat = body[n * c * h * w + n :].copy()
    return SynthDataset(
        images=images,
        y=y,
        y_categorical=y_cat,
        label_mode="continuous" if mode else "categorical",
        split=split,
    )
