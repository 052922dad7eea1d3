"""Synthetic shape dataset: generation, corruption, and binary file I/O.

Each sample pairs a grayscale image with a one-hot segmentation mask of an
elliptical structure (class 1), optionally wrapped by a ring (class 2) when
``num_classes == 3``.  Class mean intensities deliberately overlap and are
perturbed with Gaussian noise so that intensity alone does not identify a
class; an encoder has to pick up shape instead.

The corruption engine degrades a mask while keeping it a valid one-hot
map, producing predictions with a controllable quality spread: dilation
and erosion create boundary errors, shifts and holes create gross
anatomical ones.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .errors import ConfigError, DimensionError, FormatError

DATASET_MAGIC = b"CRSPDS01"
_HEADER = struct.Struct("<IIIIQ")  # count, H, W, K, seed

# background / structure / ring mean intensities; close enough to overlap
# once noise is added
CLASS_INTENSITY = (0.2, 0.7, 0.45)
DEFAULT_NOISE_SIGMA = 0.05

CORRUPTION_MODES = ("dilate", "erode", "shift", "hole", "none")

_SQUARE3 = np.ones((3, 3), dtype=bool)


@dataclass(eq=False)
class Sample:
    """One image/mask pair.

    image: (H, W) float64 in [0, 1].
    mask:  (K, H, W) float64 one-hot; channels sum to exactly 1 per pixel.
    """

    image: np.ndarray
    mask: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return np.array_equal(self.image, other.image) and np.array_equal(
            self.mask, other.mask
        )


@dataclass(eq=False)
class Dataset:
    samples: list[Sample]
    height: int
    width: int
    num_classes: int
    seed: int

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and self.num_classes == other.num_classes
            and self.seed == other.seed
            and self.samples == other.samples
        )

    def images(self) -> np.ndarray:
        """All images stacked into an (N, H, W) array."""
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        """All masks stacked into an (N, K, H, W) array."""
        return np.stack([s.mask for s in self.samples])


@dataclass(frozen=True)
class CorruptionConfig:
    """How to degrade a mask.

    ``modes`` lists the candidate corruption modes; one is drawn uniformly
    per call from ``seed``.  ``severity`` scales the damage: ceil(severity)
    morphology iterations / shift pixels / punched holes.  Severity 0 is an
    exact identity regardless of mode.
    """

    severity: float
    modes: tuple[str, ...] = ("dilate", "erode", "shift", "hole")
    seed: int = 0

    def __post_init__(self):
        if self.severity < 0:
            raise ConfigError(f"severity must be >= 0, got {self.severity}")
        if not self.modes:
            raise ConfigError("modes must be non-empty")
        for m in self.modes:
            if m not in CORRUPTION_MODES:
                raise ConfigError(f"unknown corruption mode {m!r}")


def validate_mask(mask: np.ndarray) -> np.ndarray:
    """Check a (K, H, W) array is a valid one-hot mask and return it."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 3:
        raise DimensionError(f"mask must be (K, H, W), got shape {mask.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise DimensionError("mask values must be exactly 0 or 1")
    if not (mask.sum(axis=0) == 1.0).all():
        raise DimensionError("mask channels must sum to 1 at every pixel")
    return mask


def mask_to_classes(mask: np.ndarray) -> np.ndarray:
    """One-hot (K, H, W) -> uint8 class-index plane (H, W)."""
    return np.argmax(mask, axis=0).astype(np.uint8)


def classes_to_mask(classes: np.ndarray, num_classes: int) -> np.ndarray:
    """uint8 class-index plane (H, W) -> one-hot (K, H, W) float64."""
    classes = np.asarray(classes)
    if classes.ndim != 2:
        raise DimensionError(f"class plane must be 2-D, got {classes.shape}")
    if classes.max(initial=0) >= num_classes:
        raise DimensionError(
            f"class index {classes.max()} out of range for K={num_classes}"
        )
    mask = np.zeros((num_classes,) + classes.shape, dtype=np.float64)
    for k in range(num_classes):
        mask[k] = classes == k
    return mask


def ellipse_mask(
    height: int,
    width: int,
    cy: float,
    cx: float,
    a: float,
    b: float,
    angle: float,
) -> np.ndarray:
    """Boolean mask of a filled rotated ellipse.

    ``a`` is the semi-axis along the (rotated) x direction, ``b`` along y;
    ``angle`` is in radians.  A pixel belongs to the ellipse when its
    integer grid point satisfies the canonical ellipse inequality.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - cx
    dy = ys - cy
    cos_t = math.cos(angle)
    sin_t = math.sin(angle)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_dataset(
    count: int,
    height: int,
    width: int,
    num_classes: int,
    seed: int,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
) -> Dataset:
    """Generate ``count`` random ellipse samples, reproducibly from ``seed``.

    Every sample has one filled ellipse (class 1) at a random position,
    size and orientation; with ``num_classes == 3`` it is surrounded by a
    ring (class 2).  The image is per-class mean intensity plus Gaussian
    noise, clamped to [0, 1].
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if height < 16 or width < 16:
        raise ConfigError(f"height/width must be >= 16, got {height}x{width}")
    if num_classes not in (2, 3):
        raise ConfigError(f"num_classes must be 2 or 3, got {num_classes}")
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")

    rng = np.random.default_rng(seed)
    ring_width = 0.08 * min(height, width)
    samples = []
    for _ in range(count):
        cy = rng.uniform(0.35, 0.65) * (height - 1)
        cx = rng.uniform(0.35, 0.65) * (width - 1)
        a = rng.uniform(0.12, 0.24) * width
        b = rng.uniform(0.12, 0.24) * height
        angle = rng.uniform(0.0, math.pi)

        inner = ellipse_mask(height, width, cy, cx, a, b, angle)
        classes = np.zeros((height, width), dtype=np.uint8)
        classes[inner] = 1
        if num_classes == 3:
            outer = ellipse_mask(
                height, width, cy, cx, a + ring_width, b + ring_width, angle
            )
            classes[outer & ~inner] = 2

        image = np.asarray(CLASS_INTENSITY)[classes].astype(np.float64)
        if noise_sigma > 0:
            image = image + rng.normal(0.0, noise_sigma, size=image.shape)
        image = np.clip(image, 0.0, 1.0)

        samples.append(
            Sample(image=image, mask=classes_to_mask(classes, num_classes))
        )
    return Dataset(
        samples=samples,
        height=height,
        width=width,
        num_classes=num_classes,
        seed=seed,
    )


def _dilate_classes(classes: np.ndarray, iterations: int) -> np.ndarray:
    out = classes.copy()
    for _ in range(iterations):
        fg = out != 0
        grown = ndi.binary_dilation(fg, structure=_SQUARE3)
        added = grown & ~fg
        # new pixels take the largest class label in their neighborhood
        labels = ndi.grey_dilation(out, footprint=_SQUARE3)
        out[added] = labels[added]
    return out


def _erode_classes(classes: np.ndarray, iterations: int) -> np.ndarray:
    out = classes.copy()
    for _ in range(iterations):
        fg = out != 0
        kept = ndi.binary_erosion(fg, structure=_SQUARE3, border_value=1)
        out[fg & ~kept] = 0
    return out


def _shift_classes(
    classes: np.ndarray, pixels: int, rng: np.random.Generator
) -> np.ndarray:
    angle = rng.uniform(0.0, 2.0 * math.pi)
    dy = round(pixels * math.sin(angle))
    dx = round(pixels * math.cos(angle))
    if dy == 0 and dx == 0:
        dy = pixels
    h, w = classes.shape
    out = np.zeros_like(classes)
    src_y = slice(max(0, -dy), min(h, h - dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = classes[src_y, src_x]
    return out


def _punch_holes(
    classes: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    out = classes.copy()
    h, w = out.shape
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(count):
        fg_idx = np.flatnonzero(out != 0)
        if fg_idx.size == 0:
            break
        center = fg_idx[rng.integers(fg_idx.size)]
        cy, cx = divmod(int(center), w)
        disc = (ys - cy) ** 2 + (xs - cx) ** 2 <= 4  # radius 2
        out[disc] = 0
    return out


def corrupt_mask(mask: np.ndarray, config: CorruptionConfig) -> np.ndarray:
    """Degrade a one-hot mask according to ``config``.

    The output is always a valid one-hot mask.  Severity 0 returns an
    identical copy.  Higher severity reduces the overlap with the input
    in expectation, which is what the evaluation pipeline relies on to
    get a spread of prediction qualities.
    """
    mask = validate_mask(mask)
    if config.severity == 0:
        return mask.copy()

    rng = np.random.default_rng(config.seed)
    mode = config.modes[rng.integers(len(config.modes))]
    if mode == "none":
        return mask.copy()

    k = math.ceil(config.severity)
    classes = mask_to_classes(mask)
    if mode == "dilate":
        classes = _dilate_classes(classes, k)
    elif mode == "erode":
        classes = _erode_classes(classes, k)
    elif mode == "shift":
        classes = _shift_classes(classes, k, rng)
    elif mode == "hole":
        classes = _punch_holes(classes, k, rng)
    return classes_to_mask(classes, mask.shape[0])


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset in the CRSPDS01 binary layout (little-endian)."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(
            _HEADER.pack(
                len(dataset.samples),
                dataset.height,
                dataset.width,
                dataset.num_classes,
                dataset.seed,
            )
        )
        for sample in dataset.samples:
            fh.write(sample.image.astype("<f8").tobytes(order="C"))
            fh.write(mask_to_classes(sample.mask).tobytes(order="C"))


def load_dataset(path: str | Path) -> Dataset:
    """Read a CRSPDS01 file back into a Dataset, bit-exactly."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(DATASET_MAGIC) + _HEADER.size:
        raise FormatError(f"{path}: file too short for a dataset header")
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    count, height, width, num_classes, seed = _HEADER.unpack_from(
        blob, len(DATASET_MAGIC)
    )
    if count < 1 or num_classes < 2:
        raise FormatError(f"{path}: invalid header values")

    pixels = height * width
    sample_bytes = pixels * 8 + pixels
    expected = len(DATASET_MAGIC) + _HEADER.size + count * sample_bytes
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(blob)}"
        )

    offset = len(DATASET_MAGIC) + _HEADER.size
    samples = []
    for _ in range(count):
        image = np.frombuffer(
            blob, dtype="<f8", count=pixels, offset=offset
        ).reshape(height, width)
        offset += pixels * 8
        classes = np.frombuffer(
            blob, dtype=np.uint8, count=pixels, offset=offset
        ).reshape(height, width)
        offset += pixels
        if classes.max(initial=0) >= num_classes:
            raise FormatError(f"{path}: class index out of range")
        samples.append(
            Sample(
                image=image.astype(np.float64),
                mask=classes_to_mask(classes, num_classes),
            )
        )
    return Dataset(
        samples=samples,
        height=height,
        width=width,
        num_classes=num_classes,
        seed=seed,
    )
