"""Joint image/mask embedding model and its forward computations.

Two small MLP encoders map a flattened image and a flattened one-hot mask
to latent vectors, two bias-free projection matrices map those latents
into a shared space where they are L2-normalized onto the unit
hypersphere, and a decoder maps mask latents back to per-pixel class
probabilities.  A scalar log-temperature scales pairwise cosine
similarities.  A small affine adapter from image latents to mask latents
lets the model produce its own segmentation prediction.

Encoders and decoder are affine-tanh-affine stacks on purpose: the
interesting behavior lives in the joint space, and plain dense layers
keep the hand-written backward pass in ``training`` short and exactly
checkable against finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateError, DimensionError, FormatError
from .numerics import l2_normalize

MODEL_MAGIC = b"CRSPMD01"
_CONFIG_STRUCT = struct.Struct("<IIIIIIIQ")

TAU_INIT = math.log(1.0 / 0.07)
TAU_MAX = 100.0  # ceiling on exp(tau)


@dataclass(frozen=True)
class ModelConfig:
    height: int
    width: int
    num_classes: int
    d_x: int = 32
    d_y: int = 32
    d_h: int = 16
    hidden: int = 128
    init_seed: int = 0

    def __post_init__(self):
        for name in ("d_x", "d_y", "d_h", "hidden"):
            if getattr(self, name) < 2:
                raise DimensionError(f"{name} must be >= 2")
        if self.d_h > min(self.d_x, self.d_y):
            raise DimensionError("d_h must not exceed min(d_x, d_y)")
        if self.height < 1 or self.width < 1 or self.num_classes < 2:
            raise DimensionError("invalid spatial dimensions or class count")

    @property
    def image_dim(self) -> int:
        return self.height * self.width

    @property
    def mask_dim(self) -> int:
        return self.num_classes * self.height * self.width


@dataclass(eq=False)
class CrispModel:
    """All learnable parameters.

    ``tau`` is a 1-element array holding the log-temperature so that the
    optimizer can treat every parameter uniformly as an ndarray.
    """

    config: ModelConfig
    img_w1: np.ndarray
    img_b1: np.ndarray
    img_w2: np.ndarray
    img_b2: np.ndarray
    msk_w1: np.ndarray
    msk_b1: np.ndarray
    msk_w2: np.ndarray
    msk_b2: np.ndarray
    proj_x: np.ndarray
    proj_y: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray
    seg_w: np.ndarray
    seg_b: np.ndarray
    tau: np.ndarray

    # checkpoint serialization order; also the init draw order
    PARAM_NAMES = (
        "img_w1", "img_b1", "img_w2", "img_b2",
        "msk_w1", "msk_b1", "msk_w2", "msk_b2",
        "proj_x", "proj_y",
        "dec_w1", "dec_b1", "dec_w2", "dec_b2",
        "seg_w", "seg_b",
        "tau",
    )
    # weight matrices subject to weight decay; biases and tau are exempt
    DECAY_NAMES = frozenset(
        {"img_w1", "img_w2", "msk_w1", "msk_w2", "proj_x", "proj_y",
         "dec_w1", "dec_w2", "seg_w"}
    )

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in self.PARAM_NAMES]

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.param_items())

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name in self.PARAM_NAMES:
            getattr(self, name)[...] = params[name]

    def copy(self) -> "CrispModel":
        return CrispModel(
            config=self.config,
            **{name: getattr(self, name).copy() for name in self.PARAM_NAMES},
        )

    @property
    def temperature(self) -> float:
        """exp(tau) clamped to (0, TAU_MAX]."""
        return min(float(np.exp(self.tau[0])), TAU_MAX)


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    return {
        "img_w1": (c.hidden, c.image_dim),
        "img_b1": (c.hidden,),
        "img_w2": (c.d_x, c.hidden),
        "img_b2": (c.d_x,),
        "msk_w1": (c.hidden, c.mask_dim),
        "msk_b1": (c.hidden,),
        "msk_w2": (c.d_y, c.hidden),
        "msk_b2": (c.d_y,),
        "proj_x": (c.d_h, c.d_x),
        "proj_y": (c.d_h, c.d_y),
        "dec_w1": (c.hidden, c.d_y),
        "dec_b1": (c.hidden,),
        "dec_w2": (c.mask_dim, c.hidden),
        "dec_b2": (c.mask_dim,),
        "seg_w": (c.d_y, c.d_x),
        "seg_b": (c.d_y,),
        "tau": (1,),
    }


def init_model(config: ModelConfig) -> CrispModel:
    """Deterministic initialization from ``config.init_seed``.

    Weights are Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases start at
    zero, and the log-temperature starts at ln(1/0.07).
    """
    rng = np.random.default_rng(config.init_seed)
    shapes = _param_shapes(config)
    params: dict[str, np.ndarray] = {}
    for name in CrispModel.PARAM_NAMES:
        shape = shapes[name]
        if name == "tau":
            params[name] = np.array([TAU_INIT], dtype=np.float64)
        elif name.endswith(("b1", "b2", "_b")) or name == "seg_b":
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return CrispModel(config=config, **params)


def flatten_image(config: ModelConfig, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (config.height, config.width):
        raise DimensionError(
            f"image shape {image.shape} does not match "
            f"({config.height}, {config.width})"
        )
    return image.ravel()


def flatten_mask(config: ModelConfig, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    expected = (config.num_classes, config.height, config.width)
    if mask.shape != expected:
        raise DimensionError(
            f"mask shape {mask.shape} does not match {expected}"
        )
    return mask.ravel()


# --- batched internals (also used by the training module) ---------------

def encode_images_batch(
    model: CrispModel, x_flat: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Return (hidden activations, latents) for a (B, H*W) batch."""
    u = np.tanh(x_flat @ model.img_w1.T + model.img_b1)
    z = u @ model.img_w2.T + model.img_b2
    return u, z


def encode_masks_batch(
    model: CrispModel, y_flat: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    u = np.tanh(y_flat @ model.msk_w1.T + model.msk_b1)
    z = u @ model.msk_w2.T + model.msk_b2
    return u, z


def project_batch(
    model: CrispModel, z: np.ndarray, side: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (pre-normalization vectors, row norms, unit embeddings)."""
    if side == "image":
        w = model.proj_x
    elif side == "mask":
        w = model.proj_y
    else:
        raise DimensionError(f"side must be 'image' or 'mask', got {side!r}")
    if z.shape[-1] != w.shape[1]:
        raise DimensionError(
            f"latent length {z.shape[-1]} does not match side {side!r}"
        )
    p = z @ w.T
    norms = np.linalg.norm(p, axis=-1)
    if np.any(norms == 0.0):
        raise DegenerateError(
            "projection produced a zero vector; cannot normalize"
        )
    return p, norms, p / norms[..., None]


def decode_batch(
    model: CrispModel, z_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (hidden activations, flat logits, (B, K, H, W) probabilities)."""
    c = model.config
    u = np.tanh(z_y @ model.dec_w1.T + model.dec_b1)
    logits = u @ model.dec_w2.T + model.dec_b2
    shaped = logits.reshape(-1, c.num_classes, c.height, c.width)
    shifted = shaped - shaped.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return u, logits, probs


# --- public single-sample operations ------------------------------------

def encode_image(model: CrispModel, image: np.ndarray) -> np.ndarray:
    """Image (H, W) -> latent vector of length d_x."""
    x = flatten_image(model.config, image)
    _, z = encode_images_batch(model, x[None, :])
    return z[0]


def encode_mask(model: CrispModel, mask: np.ndarray) -> np.ndarray:
    """Mask (K, H, W) -> latent vector of length d_y."""
    y = flatten_mask(model.config, mask)
    _, z = encode_masks_batch(model, y[None, :])
    return z[0]


def project(model: CrispModel, z: np.ndarray, side: str) -> np.ndarray:
    """Project a latent into the joint space and normalize onto the sphere."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"latent must be 1-D, got shape {z.shape}")
    w = model.proj_x if side == "image" else model.proj_y
    if side not in ("image", "mask"):
        raise DimensionError(f"side must be 'image' or 'mask', got {side!r}")
    if z.shape[0] != w.shape[1]:
        raise DimensionError(
            f"latent length {z.shape[0]} does not match side {side!r}"
        )
    unit, _ = l2_normalize(w @ z)
    return unit


def similarity_matrix(
    h_x: np.ndarray, h_y: np.ndarray, tau: float
) -> np.ndarray:
    """Temperature-scaled cosine similarities between two embedding batches.

    Rows of ``h_x`` and ``h_y`` are unit vectors; entry (i, j) is their dot
    product times exp(tau) (clamped at TAU_MAX).
    """
    h_x = np.asarray(h_x, dtype=np.float64)
    h_y = np.asarray(h_y, dtype=np.float64)
    if h_x.shape != h_y.shape:
        raise DimensionError(
            f"embedding batches differ in shape: {h_x.shape} vs {h_y.shape}"
        )
    scale = min(math.exp(float(tau)), TAU_MAX)
    return (h_x @ h_y.T) * scale


def decode(model: CrispModel, z_y: np.ndarray) -> np.ndarray:
    """Mask latent -> (K, H, W) per-pixel class probabilities."""
    z_y = np.asarray(z_y, dtype=np.float64)
    if z_y.shape != (model.config.d_y,):
        raise DimensionError(
            f"latent shape {z_y.shape} does not match d_y={model.config.d_y}"
        )
    _, _, probs = decode_batch(model, z_y[None, :])
    return probs[0]


def adapt_latent(model: CrispModel, z_x: np.ndarray) -> np.ndarray:
    """Affine map from an image latent to a mask latent."""
    return model.seg_w @ z_x + model.seg_b


def segment(model: CrispModel, image: np.ndarray) -> np.ndarray:
    """Predict a (K, H, W) probability map directly from an image."""
    z_x = encode_image(model, image)
    return decode(model, adapt_latent(model, z_x))


# --- checkpoint I/O -----------------------------------------------------

def save_model(model: CrispModel, path: str | Path) -> None:
    """Write a CRSPMD01 checkpoint (config header + float64 blobs)."""
    c = model.config
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(
            _CONFIG_STRUCT.pack(
                c.height, c.width, c.num_classes,
                c.d_x, c.d_y, c.d_h, c.hidden, c.init_seed,
            )
        )
        for _, value in model.param_items():
            fh.write(value.astype("<f8").tobytes(order="C"))


def load_model(path: str | Path) -> CrispModel:
    """Read a CRSPMD01 checkpoint; rejects bad magic and size mismatches."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MODEL_MAGIC) + _CONFIG_STRUCT.size:
        raise FormatError(f"{path}: file too short for a checkpoint header")
    if blob[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    fields = _CONFIG_STRUCT.unpack_from(blob, len(MODEL_MAGIC))
    try:
        config = ModelConfig(*fields)
    except DimensionError as exc:
        raise FormatError(f"{path}: invalid config in header: {exc}") from exc

    shapes = _param_shapes(config)
    expected = len(MODEL_MAGIC) + _CONFIG_STRUCT.size + 8 * sum(
        int(np.prod(shapes[name])) for name in CrispModel.PARAM_NAMES
    )
    if len(blob) != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes, found {len(blob)}"
        )

    offset = len(MODEL_MAGIC) + _CONFIG_STRUCT.size
    params: dict[str, np.ndarray] = {}
    for name in CrispModel.PARAM_NAMES:
        shape = shapes[name]
        n = int(np.prod(shape))
        params[name] = (
            np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += 8 * n
    return CrispModel(config=config, **params)
