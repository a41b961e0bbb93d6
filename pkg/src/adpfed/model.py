"""Per-pixel MLP segmentation model with soft Dice loss and hand-written
backprop, plus Adam and a cosine learning-rate schedule.

Every pixel is described by ``F = 4`` features: its intensity, the 3x3 mean
intensity around it (edge-replicated at borders), and its normalized x and y
coordinates. The network is ``F -> H (tanh) -> 1 (sigmoid)``.

Flat parameter layout (length ``F*H + H + H + 1``)::

    [ W1 (F x H, row-major) | b1 (H) | W2 (H) | b2 (1) ]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import params

N_FEATURES = 4
DICE_SMOOTH = 1.0


def n_params(hidden: int, n_features: int = N_FEATURES) -> int:
    return n_features * hidden + hidden + hidden + 1


def unflatten(w, hidden: int):
    w = np.asarray(w, dtype=np.float64)
    F, H = N_FEATURES, hidden
    if w.shape[0] != n_params(H):
        raise params.DimensionError(
            f"expected {n_params(H)} parameters for hidden={H}, got {w.shape[0]}"
        )
    i = 0
    W1 = w[i:i + F * H].reshape(F, H)
    i += F * H
    b1 = w[i:i + H]
    i += H
    W2 = w[i:i + H]
    i += H
    b2 = w[i]
    return W1, b1, W2, b2


def flatten(W1, b1, W2, b2) -> np.ndarray:
    return params.as_params(
        np.concatenate([np.ravel(W1), np.ravel(b1), np.ravel(W2), np.atleast_1d(b2)])
    )


def init_weights(rng: np.random.Generator, hidden: int = 16, scale: float = 1.0) -> np.ndarray:
    """Glorot-style normal init, zero biases."""
    W1 = rng.normal(0.0, scale * math.sqrt(2.0 / (N_FEATURES + hidden)), (N_FEATURES, hidden))
    W2 = rng.normal(0.0, scale * math.sqrt(2.0 / (hidden + 1)), hidden)
    return flatten(W1, np.zeros(hidden), W2, 0.0)


def pixel_features(image) -> np.ndarray:
    """(H, W) image -> (H*W, 4) feature matrix."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    local = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            local += padded[dy:dy + h, dx:dx + w]
    local /= 9.0
    ys, xs = np.meshgrid(
        np.linspace(0.0, 1.0, h) if h > 1 else np.zeros(1),
        np.linspace(0.0, 1.0, w) if w > 1 else np.zeros(1),
        indexing="ij",
    )
    return np.stack([img.ravel(), local.ravel(), xs.ravel(), ys.ravel()], axis=1)


def batch_features(images) -> np.ndarray:
    return np.stack([pixel_features(im) for im in images])


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_features(w, feats, hidden):
    W1, b1, W2, b2 = unflatten(w, hidden)
    hid = np.tanh(feats @ W1 + b1)
    prob = sigmoid(hid @ W2 + b2)
    return prob, hid


def forward(w, image, hidden: int = 16) -> np.ndarray:
    """Probability mask with the same shape as ``image``."""
    image = np.asarray(image, dtype=np.float64)
    prob, _ = _forward_features(w, pixel_features(image), hidden)
    return prob.reshape(image.shape)


def predict_features(w, feats, hidden: int = 16) -> np.ndarray:
    """Probabilities for precomputed (..., P, 4) features, shape (..., P)."""
    prob, _ = _forward_features(w, feats, hidden)
    return prob


def soft_dice_loss(pred, target, smooth: float = DICE_SMOOTH) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise params.DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    inter = float(np.sum(pred * target))
    denom = float(np.sum(pred) + np.sum(target)) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def loss_and_gradient(w, feats, targets, hidden: int = 16, smooth: float = DICE_SMOOTH):
    """Mean soft Dice loss over a batch and its gradient w.r.t. the flat weights.

    ``feats`` is (B, P, F) and ``targets`` is (B, P).
    """
    feats = np.asarray(feats, dtype=np.float64)
    g = np.asarray(targets, dtype=np.float64)
    B = feats.shape[0]
    W1, b1, W2, b2 = unflatten(w, hidden)

    hid = np.tanh(feats @ W1 + b1)  # (B, P, H)
    p = sigmoid(hid @ W2 + b2)  # (B, P)

    inter = np.sum(p * g, axis=1)
    denom = np.sum(p, axis=1) + np.sum(g, axis=1) + smooth
    num = 2.0 * inter + smooth
    loss = float(np.mean(1.0 - num / denom))

    # d(1 - num/denom)/dp_i = -(2 g_i denom - num) / denom^2, averaged over batch
    dp = -(2.0 * g * denom[:, None] - num[:, None]) / (denom[:, None] ** 2) / B
    dz = dp * p * (1.0 - p)  # (B, P)

    gb2 = np.sum(dz)
    gW2 = np.einsum("bp,bph->h", dz, hid)
    da = dz[:, :, None] * W2 * (1.0 - hid * hid)  # (B, P, H)
    gb1 = np.sum(da, axis=(0, 1))
    gW1 = np.einsum("bpf,bph->fh", feats, da)
    return loss, flatten(gW1, gb1, gW2, gb2)


def gradient(w, images, masks, hidden: int = 16) -> np.ndarray:
    feats = batch_features(images)
    targets = np.stack([np.asarray(m, dtype=np.float64).ravel() for m in masks])
    return loss_and_gradient(w, feats, targets, hidden)[1]


@dataclass
class AdamConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, d: int) -> "OptimizerState":
        return cls(m=np.zeros(d), v=np.zeros(d), step=0)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.step)


def adam_step(
    state: OptimizerState, w, g, cfg: AdamConfig, lr: float | None = None
) -> tuple[np.ndarray, OptimizerState]:
    """One Adam update with bias correction and decoupled weight decay.

    ``lr`` overrides ``cfg.lr`` (used for the annealed per-round rate).
    Returns new weights and a new state; the inputs are not modified.
    """
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    params.check_same_length(w, g)
    params.check_same_length(w, state.m)
    eta = cfg.lr if lr is None else lr
    t = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    w_new = w - eta * cfg.weight_decay * w
    w_new = w_new - eta * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params.as_params(w_new), OptimizerState(m, v, t)


class ScheduleError(ValueError):
    pass


def cosine_lr(t: int, total: int, base_lr: float) -> float:
    if not 0 <= t < total:
        raise ScheduleError(f"round {t} outside schedule of length {total}")
    return base_lr * (1.0 + math.cos(math.pi * t / total)) / 2.0


@dataclass
class LocalTrainConfig:
    epochs: int = 1
    batch_size: int = 4
    adam: AdamConfig = field(default_factory=AdamConfig)
    hidden: int = 16


def local_train(
    w0,
    feats: np.ndarray,
    targets: np.ndarray,
    cfg: LocalTrainConfig,
    state: OptimizerState,
    lr: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, OptimizerState, float]:
    """Run ``cfg.epochs`` shuffled passes over a client's training shard.

    ``feats``/``targets`` are the shard's precomputed (n, P, F) features and
    (n, P) masks. Returns the trained weights, the updated optimizer state and
    the mean mini-batch loss of the last epoch.
    """
    n = feats.shape[0]
    if n < 1:
        raise ValueError("training shard is empty")
    if cfg.epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {cfg.epochs}")
    w = params.as_params(w0)
    last_loss = float("nan")
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = loss_and_gradient(w, feats[idx], targets[idx], cfg.hidden)
            w, state = adam_step(state, w, g, cfg.adam, lr=lr)
            losses.append(loss)
        last_loss = float(np.mean(losses))
    return w, state, last_loss
