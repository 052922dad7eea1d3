"""Losses, hand-derived backpropagation, Adam, and the training loop.

The full loss is L = L_cont + L_rec: a symmetric cross-entropy over the
scaled cosine-similarity matrix plus a Dice+cross-entropy reconstruction
of each mask from its own latent.  Every gradient here is written out by
hand and is exact, which the tests verify against central finite
differences.

An affine adapter (image latent -> mask latent) is optimized in the same
loop from a detached objective: its gradients never flow into the
encoders or the decoder, so the L = L_cont + L_rec contract stays exact
while the model still learns to produce its own segmentations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, Sample
from .errors import ConfigError, DimensionError
from .model import (
    CrispModel,
    ModelConfig,
    TAU_MAX,
    decode_batch,
    encode_images_batch,
    encode_masks_batch,
    flatten_image,
    flatten_mask,
    init_model,
    project_batch,
)

PROB_FLOOR = 1e-12  # clamp inside every log term
DICE_SMOOTH = 1e-6

HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_cont", "val_rec",
                  "diag_acc")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0
    dice_weight: float = 1.0
    ce_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie strictly in (0, 1)")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning_rate and adam_eps must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs, patience must be >= 1")
        if self.dice_weight < 0 or self.ce_weight < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_contrastive: list = field(default_factory=list)
    val_reconstruction: list = field(default_factory=list)
    diag_accuracy: list = field(default_factory=list)
    selected_epoch: int = -1

    def num_epochs(self) -> int:
        return len(self.train_loss)

    def save_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_HEADER)
            for e in range(self.num_epochs()):
                writer.writerow([
                    e,
                    f"{self.train_loss[e]:.10g}",
                    f"{self.val_loss[e]:.10g}",
                    f"{self.val_contrastive[e]:.10g}",
                    f"{self.val_reconstruction[e]:.10g}",
                    f"{self.diag_accuracy[e]:.10g}",
                ])


def contrastive_loss(s: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric cross-entropy over a square similarity matrix.

    The target pairing is the identity: row i should peak at column i and
    vice versa.  Returns the loss and its exact gradient with respect to
    ``s``.  Diagonal softmax values are clamped at 1e-12 inside the log;
    a clamped term contributes zero gradient.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"similarity matrix must be square, got {s.shape}")
    b = s.shape[0]

    shifted = s - s.max(axis=1, keepdims=True)
    rows = np.exp(shifted)
    rows /= rows.sum(axis=1, keepdims=True)
    shifted = s - s.max(axis=0, keepdims=True)
    cols = np.exp(shifted)
    cols /= cols.sum(axis=0, keepdims=True)

    diag_r = np.diagonal(rows)
    diag_c = np.diagonal(cols)
    loss = -0.5 * (
        np.mean(np.log(np.maximum(diag_r, PROB_FLOOR)))
        + np.mean(np.log(np.maximum(diag_c, PROB_FLOOR)))
    )

    eye = np.eye(b)
    ok_r = (diag_r > PROB_FLOOR).astype(np.float64)
    ok_c = (diag_c > PROB_FLOOR).astype(np.float64)
    ds = (rows - eye) * ok_r[:, None] + (cols - eye) * ok_c[None, :]
    ds /= 2.0 * b
    return float(loss), ds


def dice_ce_loss(
    pred: np.ndarray,
    target: np.ndarray,
    dice_weight: float = 1.0,
    ce_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Weighted soft-Dice + pixel cross-entropy for one (K, H, W) sample.

    ``pred`` holds pixelwise-normalized class probabilities; the returned
    gradient is taken with respect to the pre-softmax logits that produced
    them, so callers can feed it straight into the decoder backward pass.
    The Dice term averages over foreground classes only (k >= 1) with a
    1e-6 smoothing constant.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 3:
        raise DimensionError(
            f"prediction {pred.shape} and target {target.shape} must be "
            "matching (K, H, W) arrays"
        )
    k, h, w = pred.shape
    npix = h * w

    safe = np.maximum(pred, PROB_FLOOR)
    ce = -(target * np.log(safe)).sum() / npix
    # dCE/dpred; clamped probabilities get zero gradient
    g = np.where(pred > PROB_FLOOR, -target / safe, 0.0) * (ce_weight / npix)

    dice_sum = 0.0
    for c in range(1, k):
        inter = float((pred[c] * target[c]).sum())
        union = float(pred[c].sum() + target[c].sum()) + DICE_SMOOTH
        dice_sum += (2.0 * inter + DICE_SMOOTH) / union
        # d(1 - dice_c)/dpred_c, scaled by the foreground-class mean
        g[c] += (
            -dice_weight / (k - 1)
            * (2.0 * target[c] * union - (2.0 * inter + DICE_SMOOTH))
            / union**2
        )
    soft_dice = dice_sum / (k - 1)
    loss = dice_weight * (1.0 - soft_dice) + ce_weight * ce

    # chain through the per-pixel softmax: dL/dz_j = p_j (g_j - sum_c g_c p_c)
    dot = (g * pred).sum(axis=0, keepdims=True)
    dlogits = pred * (g - dot)
    return float(loss), dlogits


def _batch_arrays(
    config: ModelConfig, batch: Sequence[Sample] | Dataset
) -> tuple[np.ndarray, np.ndarray]:
    samples = batch.samples if isinstance(batch, Dataset) else list(batch)
    if not samples:
        raise DimensionError("batch is empty")
    x = np.stack([flatten_image(config, s.image) for s in samples])
    y = np.stack([flatten_mask(config, s.mask) for s in samples])
    return x, y


def _zero_grads(model: CrispModel) -> dict:
    return {name: np.zeros_like(p) for name, p in model.param_items()}


def _forward_backward(
    model: CrispModel,
    x_flat: np.ndarray,
    y_flat: np.ndarray,
    dice_weight: float,
    ce_weight: float,
    with_adapter: bool,
) -> tuple[float, float, float, dict]:
    """Compute (L_cont, L_rec, L_seg, grads) for a flat batch.

    The adapter term is optional and detached: when enabled, its
    gradients land only on seg_w/seg_b.
    """
    c = model.config
    b = x_flat.shape[0]
    grads = _zero_grads(model)

    # forward
    u1, z_x = encode_images_batch(model, x_flat)
    u2, z_y = encode_masks_batch(model, y_flat)
    p_x, n_x, h_x = project_batch(model, z_x, "image")
    p_y, n_y, h_y = project_batch(model, z_y, "mask")
    raw = h_x @ h_y.T
    temp = float(np.exp(model.tau[0]))
    clamped = temp > TAU_MAX
    scale = TAU_MAX if clamped else temp
    s = raw * scale
    loss_cont, ds = contrastive_loss(s)

    u3, logits, probs = decode_batch(model, z_y)
    target = y_flat.reshape(b, c.num_classes, c.height, c.width)
    loss_rec = 0.0
    dlogits = np.empty_like(logits)
    for i in range(b):
        li, gi = dice_ce_loss(probs[i], target[i], dice_weight, ce_weight)
        loss_rec += li
        dlogits[i] = gi.ravel() / b
    loss_rec /= b

    # backward: contrastive -> embeddings and temperature
    d_hx = scale * (ds @ h_y)
    d_hy = scale * (ds.T @ h_x)
    if not clamped:
        grads["tau"][0] = float((ds * raw).sum()) * temp

    # unit-normalization backward, rowwise
    d_px = (d_hx - h_x * (h_x * d_hx).sum(axis=1, keepdims=True)) / n_x[:, None]
    d_py = (d_hy - h_y * (h_y * d_hy).sum(axis=1, keepdims=True)) / n_y[:, None]
    grads["proj_x"] = d_px.T @ z_x
    grads["proj_y"] = d_py.T @ z_y
    d_zx = d_px @ model.proj_x
    d_zy = d_py @ model.proj_y

    # reconstruction backward: decoder, then fold into mask latents
    grads["dec_w2"] = dlogits.T @ u3
    grads["dec_b2"] = dlogits.sum(axis=0)
    d_u3 = dlogits @ model.dec_w2
    d_pre3 = d_u3 * (1.0 - u3 * u3)
    grads["dec_w1"] = d_pre3.T @ z_y
    grads["dec_b1"] = d_pre3.sum(axis=0)
    d_zy = d_zy + d_pre3 @ model.dec_w1

    # image encoder
    grads["img_w2"] = d_zx.T @ u1
    grads["img_b2"] = d_zx.sum(axis=0)
    d_u1 = d_zx @ model.img_w2
    d_pre1 = d_u1 * (1.0 - u1 * u1)
    grads["img_w1"] = d_pre1.T @ x_flat
    grads["img_b1"] = d_pre1.sum(axis=0)

    # mask encoder
    grads["msk_w2"] = d_zy.T @ u2
    grads["msk_b2"] = d_zy.sum(axis=0)
    d_u2 = d_zy @ model.msk_w2
    d_pre2 = d_u2 * (1.0 - u2 * u2)
    grads["msk_w1"] = d_pre2.T @ y_flat
    grads["msk_b1"] = d_pre2.sum(axis=0)

    loss_seg = 0.0
    if with_adapter:
        z_hat = z_x @ model.seg_w.T + model.seg_b  # z_x treated as constant
        u3a, logits_a, probs_a = decode_batch(model, z_hat)
        dlogits_a = np.empty_like(logits_a)
        for i in range(b):
            li, gi = dice_ce_loss(probs_a[i], target[i], dice_weight, ce_weight)
            loss_seg += li
            dlogits_a[i] = gi.ravel() / b
        loss_seg /= b
        # decoder weights stay frozen on this path
        d_u3a = dlogits_a @ model.dec_w2
        d_pre3a = d_u3a * (1.0 - u3a * u3a)
        d_zhat = d_pre3a @ model.dec_w1
        grads["seg_w"] = d_zhat.T @ z_x
        grads["seg_b"] = d_zhat.sum(axis=0)

    return loss_cont, loss_rec, loss_seg, grads


def total_loss(
    batch: Sequence[Sample] | Dataset,
    model: CrispModel,
    dice_weight: float = 1.0,
    ce_weight: float = 1.0,
) -> tuple[float, dict]:
    """L = L_cont + L_rec over a batch, with exact parameter gradients.

    Gradients flow through the normalization, both projections, both
    encoders, the decoder, and the temperature.  The adapter parameters
    receive zero gradient here; they are trained separately.
    """
    x_flat, y_flat = _batch_arrays(model.config, batch)
    loss_cont, loss_rec, _, grads = _forward_backward(
        model, x_flat, y_flat, dice_weight, ce_weight, with_adapter=False
    )
    return loss_cont + loss_rec, grads


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam_state(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
    )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    config: TrainConfig,
    decay_names: Iterable[str] | None = None,
) -> None:
    """One in-place Adam update with decoupled weight decay.

    Decay is applied directly to the parameters before the moment update
    (theta <- theta - lr*wd*theta).  ``decay_names`` restricts which
    parameters decay; None means all of them.
    """
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    decay = set(params) if decay_names is None else set(decay_names)
    for name, p in params.items():
        g = grads[name]
        if config.weight_decay > 0.0 and name in decay:
            p *= 1.0 - config.learning_rate * config.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.learning_rate * (m / bias1) / (np.sqrt(v / bias2)
                                                   + config.adam_eps)


def diag_accuracy(model: CrispModel, samples: Sequence[Sample]) -> float:
    """Fraction of images whose best-matching mask embedding is their own."""
    x_flat, y_flat = _batch_arrays(model.config, samples)
    _, z_x = encode_images_batch(model, x_flat)
    _, z_y = encode_masks_batch(model, y_flat)
    _, _, h_x = project_batch(model, z_x, "image")
    _, _, h_y = project_batch(model, z_y, "mask")
    s = h_x @ h_y.T
    return float(np.mean(s.argmax(axis=1) == np.arange(s.shape[0])))


def _val_stats(
    model: CrispModel, x_flat, y_flat, dice_weight, ce_weight
) -> tuple[float, float, float]:
    """(contrastive, reconstruction, diag accuracy) on a full split."""
    c = model.config
    _, z_x = encode_images_batch(model, x_flat)
    _, z_y = encode_masks_batch(model, y_flat)
    _, _, h_x = project_batch(model, z_x, "image")
    _, _, h_y = project_batch(model, z_y, "mask")
    s = (h_x @ h_y.T) * model.temperature
    loss_cont, _ = contrastive_loss(s)
    _, _, probs = decode_batch(model, z_y)
    target = y_flat.reshape(-1, c.num_classes, c.height, c.width)
    loss_rec = np.mean([
        dice_ce_loss(probs[i], target[i], dice_weight, ce_weight)[0]
        for i in range(probs.shape[0])
    ])
    acc = float(np.mean(s.argmax(axis=1) == np.arange(s.shape[0])))
    return loss_cont, float(loss_rec), acc


def split_indices(
    n: int, train_config: TrainConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation index split.

    The dataset order is shuffled once under the training seed; the last
    ``val_fraction`` of the shuffled order (at least one sample) becomes
    the validation set.
    """
    cfg = train_config
    n_val = max(1, int(round(cfg.val_fraction * n)))
    order = np.random.default_rng(cfg.seed).permutation(n)
    return order[: n - n_val], order[n - n_val:]


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[CrispModel, TrainHistory]:
    """Fit a model with early stopping; fully deterministic given seeds.

    The dataset is shuffled once under the training seed and its final
    ``val_fraction`` becomes the validation split.  Partial trailing
    batches are dropped.  The returned model carries the weights of the
    epoch with the lowest validation loss.
    """
    cfg = train_config
    samples = dataset.samples
    n = len(samples)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_train = n - max(1, int(round(cfg.val_fraction * n)))
    if n_train < cfg.batch_size:
        raise ConfigError(
            f"{n_train} training samples after the split cannot fill one "
            f"batch of {cfg.batch_size}"
        )
    train_idx = order[:n_train]
    val_idx = order[n_train:]

    x_all, y_all = _batch_arrays(model_config, samples)
    x_val, y_val = x_all[val_idx], y_all[val_idx]

    model = init_model(model_config)
    state = init_adam_state(model.params())
    history = TrainHistory()

    best_val = np.inf
    best_epoch = -1
    best_params = None
    for epoch in range(cfg.max_epochs):
        perm = train_idx[rng.permutation(n_train)]
        epoch_loss = 0.0
        n_batches = n_train // cfg.batch_size
        for bi in range(n_batches):
            idx = perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            loss_cont, loss_rec, loss_seg, grads = _forward_backward(
                model, x_all[idx], y_all[idx],
                cfg.dice_weight, cfg.ce_weight, with_adapter=True,
            )
            epoch_loss += loss_cont + loss_rec
            adam_step(model.params(), grads, state, cfg,
                      decay_names=CrispModel.DECAY_NAMES)
        epoch_loss /= n_batches

        val_cont, val_rec, val_acc = _val_stats(
            model, x_val, y_val, cfg.dice_weight, cfg.ce_weight
        )
        val_loss = val_cont + val_rec
        history.train_loss.append(epoch_loss)
        history.val_loss.append(val_loss)
        history.val_contrastive.append(val_cont)
        history.val_reconstruction.append(val_rec)
        history.diag_accuracy.append(val_acc)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: p.copy() for k, p in model.param_items()}
        elif epoch - best_epoch >= cfg.patience:
            break

    model.set_params(best_params)
    history.selected_epoch = best_epoch
    return model, history
