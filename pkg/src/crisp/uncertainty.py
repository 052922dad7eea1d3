"""Latent bank retrieval, vMF weighting, and uncertainty maps.

The core estimator embeds a query image into the joint space, retrieves
the most similar ground-truth mask embeddings from a bank, decodes their
latents into probability maps, and averages the per-pixel disagreement
between each decoded map and the prediction under consideration, weighted
by a von Mises-Fisher kernel on the hypersphere.  Two training-free
baselines (morphological edge bands and prediction entropy) share the
same H x W map-in-[0,1] output convention.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import Dataset
from .errors import ConfigError, DegenerateError, DimensionError, FormatError
from .model import (
    CrispModel,
    decode_batch,
    encode_image,
    encode_masks_batch,
    flatten_mask,
    project,
)

UNCERTAINTY_MAGIC = b"CRSPUM01"
_UM_HEADER = struct.Struct("<II")

EDGE_ITERATIONS = 5
_SQUARE3 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class LatentBank:
    """Aligned mask latents and their unit joint embeddings."""

    z_bar: np.ndarray  # (N, d_y)
    h_bar: np.ndarray  # (N, d_h), rows unit-norm

    @property
    def n(self) -> int:
        return self.z_bar.shape[0]


@dataclass(frozen=True)
class VmfKernel:
    mu: np.ndarray
    r_m: float
    kappa: float
    b: float


def build_bank(
    masks: Sequence[np.ndarray] | Dataset, model: CrispModel
) -> LatentBank:
    """Encode and project every ground-truth mask once, up front."""
    if isinstance(masks, Dataset):
        masks = [s.mask for s in masks.samples]
    masks = list(masks)
    if len(masks) < 2:
        raise ConfigError(f"bank needs at least 2 masks, got {len(masks)}")
    y_flat = np.stack([flatten_mask(model.config, m) for m in masks])
    _, z_bar = encode_masks_batch(model, y_flat)
    p = z_bar @ model.proj_y.T
    norms = np.linalg.norm(p, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateError(
            f"mask {int(zero[0])} projects to the zero vector; "
            "cannot place it on the hypersphere"
        )
    return LatentBank(z_bar=z_bar, h_bar=p / norms[:, None])


def retrieve(
    h_x: np.ndarray, bank: LatentBank, m: int
) -> tuple[np.ndarray, np.ndarray]:
    """Indices and similarities of the M bank rows closest to ``h_x``.

    Similarities come back in descending order; ties resolve to the lower
    bank index.
    """
    if not 1 <= m <= bank.n:
        raise ConfigError(f"M={m} outside [1, {bank.n}]")
    sims = bank.h_bar @ np.asarray(h_x, dtype=np.float64)
    order = np.argsort(-sims, kind="stable")[:m]
    return order, sims[order]


def fit_vmf(bank: LatentBank) -> VmfKernel:
    """Moment estimate of a vMF kernel from the bank embeddings.

    The resultant length r_m of the mean embedding gives the
    concentration kappa = r_m (d_h - r_m^2) / (1 - r_m^2); the bandwidth
    follows the N^(-1/5) rule b = kappa^(-1/2) (40 sqrt(pi) / N)^(1/5).
    """
    if bank.n < 2:
        raise ConfigError("vMF fit needs at least 2 bank entries")
    h_m = bank.h_bar.mean(axis=0)
    r_m = float(np.linalg.norm(h_m))
    if r_m == 0.0:
        raise DegenerateError(
            "mean embedding is the zero vector; no mean direction exists"
        )
    if r_m >= 1.0 - 1e-12:
        raise DegenerateError(
            "embeddings are coincident (r_m ~ 1); concentration diverges"
        )
    d_h = bank.h_bar.shape[1]
    kappa = r_m * (d_h - r_m**2) / (1.0 - r_m**2)
    b = kappa ** -0.5 * (40.0 * math.sqrt(math.pi) / bank.n) ** 0.2
    return VmfKernel(mu=h_m / r_m, r_m=r_m, kappa=kappa, b=b)


def vmf_weight(h_i: np.ndarray, h_x: np.ndarray, b: float) -> float:
    """Kernel weight exp((h_i . h_x - 1) / b); 1 exactly at coincidence."""
    dot = float(np.asarray(h_i) @ np.asarray(h_x))
    return min(math.exp((dot - 1.0) / b), 1.0)


def default_m(n: int) -> int:
    """Retrieval count proportional to bank size, floored at 5."""
    return min(max(5, round(0.03 * n)), n)


def crisp_uncertainty(
    image: np.ndarray,
    y_star: np.ndarray,
    model: CrispModel,
    bank: LatentBank,
    m: int | None = None,
    normalize: str = "count",
) -> np.ndarray:
    """Retrieval-based uncertainty map for a prediction ``y_star``.

    Each of the M retrieved bank latents is decoded to a soft map; the
    per-pixel disagreement with y_star is half the L1 distance across
    class channels (total-variation distance, in [0,1]).  Disagreements
    are combined with vMF kernel weights and divided by M
    (``normalize="count"``) or by the weight sum (``normalize="weight"``),
    then clamped to [0,1].
    """
    if normalize not in ("count", "weight"):
        raise ConfigError(f"unknown normalize mode {normalize!r}")
    c = model.config
    target = flatten_mask(c, y_star).reshape(c.num_classes, c.height, c.width)
    if m is None:
        m = default_m(bank.n)

    h_x = project(model, encode_image(model, image), "image")
    indices, _ = retrieve(h_x, bank, m)
    kernel = fit_vmf(bank)
    weights = np.array(
        [vmf_weight(bank.h_bar[i], h_x, kernel.b) for i in indices]
    )

    _, _, decoded = decode_batch(model, bank.z_bar[indices])
    diff = 0.5 * np.abs(decoded - target[None]).sum(axis=1)  # (M, H, W)
    total = (weights[:, None, None] * diff).sum(axis=0)
    denom = float(m) if normalize == "count" else float(weights.sum())
    return np.clip(total / denom, 0.0, 1.0)


def edge_uncertainty(y_star: np.ndarray) -> np.ndarray:
    """Morphological band uncertainty around the predicted boundary.

    Foreground is the union of non-background classes.  For n = 1..5 the
    nth dilation/erosion rings (3x3 square element) get weight 1 - n/5,
    leaving 4 nonzero bands on each side of the boundary.  Erosion treats
    pixels beyond the border as foreground so grid edges are not
    boundaries.
    """
    y_star = np.asarray(y_star, dtype=np.float64)
    if y_star.ndim != 3:
        raise DimensionError(f"mask must be (K, H, W), got {y_star.shape}")
    fg = y_star.argmax(axis=0) != 0

    u = np.zeros(fg.shape, dtype=np.float64)
    prev_dil = fg
    prev_ero = fg
    for n in range(1, EDGE_ITERATIONS + 1):
        dil = ndimage.binary_dilation(fg, structure=_SQUARE3, iterations=n)
        ero = ndimage.binary_erosion(
            fg, structure=_SQUARE3, iterations=n, border_value=1
        )
        ring = (dil & ~prev_dil) | (prev_ero & ~ero)
        u += ring * (1.0 - n / EDGE_ITERATIONS)
        prev_dil, prev_ero = dil, ero
    return u


def entropy_uncertainty(prob_map: np.ndarray) -> np.ndarray:
    """Normalized per-pixel entropy of a (K, H, W) probability map."""
    p = np.asarray(prob_map, dtype=np.float64)
    if p.ndim != 3:
        raise DimensionError(
            f"probability map must be (K, H, W), got {p.shape}"
        )
    terms = np.where(p > 0.0, -p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return terms.sum(axis=0) / math.log(p.shape[0])


# --- map serialization --------------------------------------------------

def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """8-bit binary PGM (P5) from a uint8 (H, W) array."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise DimensionError(f"image must be 2-D, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise DimensionError(f"pixels must be uint8, got {pixels.dtype}")
    h, w = pixels.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


def save_pgm(path: str | Path, values: np.ndarray) -> None:
    """Render an uncertainty map as a PGM; pixel value = round(255 * U)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"map must be 2-D, got shape {values.shape}")
    write_pgm(path, np.rint(255.0 * values).astype(np.uint8))


def load_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM written by :func:`save_pgm`; returns uint8 (H, W)."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path}: not a P5 PGM")
    # header = magic, width, height, maxval, then a single whitespace byte
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(int(blob[start:pos]))
    pos += 1  # the one whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos:]
    if len(data) != h * w:
        raise FormatError(f"{path}: expected {h * w} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def save_uncertainty(path: str | Path, values: np.ndarray) -> None:
    """Raw float64 sidecar: magic | u32 H | u32 W | row-major values."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"map must be 2-D, got shape {values.shape}")
    h, w = values.shape
    with Path(path).open("wb") as fh:
        fh.write(UNCERTAINTY_MAGIC)
        fh.write(_UM_HEADER.pack(h, w))
        fh.write(values.astype("<f8").tobytes(order="C"))


def load_uncertainty(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    header = len(UNCERTAINTY_MAGIC) + _UM_HEADER.size
    if len(blob) < header:
        raise FormatError(f"{path}: file too short for an uncertainty map")
    if blob[: len(UNCERTAINTY_MAGIC)] != UNCERTAINTY_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    h, w = _UM_HEADER.unpack_from(blob, len(UNCERTAINTY_MAGIC))
    if len(blob) != header + 8 * h * w:
        raise FormatError(
            f"{path}: expected {header + 8 * h * w} bytes, found {len(blob)}"
        )
    return (
        np.frombuffer(blob, dtype="<f8", offset=header)
        .reshape(h, w)
        .astype(np.float64)
    )
