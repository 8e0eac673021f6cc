"""Softmax cross-entropy, focal loss and class-balanced re-weighting.

Every loss returns ``(loss, dloss/dlogits)``. Optional per-sample weights
scale each sample's term and the total is divided by the batch size, so
scaling all weights by ``a`` scales the loss and its gradient by ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from feataug.errors import ConfigError, DataError

LOSS_KINDS = ("cross_entropy", "focal", "class_balanced")


@dataclass
class LossConfig:
    kind: str = "cross_entropy"
    focal_exponent: float = 0.0
    cb_beta: float = 0.999
    per_class_counts: list[int] | None = field(default=None)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not np.isfinite(self.focal_exponent) or self.focal_exponent < 0:
            raise ConfigError("loss.focal_exponent must be finite and >= 0")
        if self.kind == "class_balanced":
            if not self.per_class_counts:
                raise ConfigError("class_balanced loss requires per_class_counts")
            if not 0 <= self.cb_beta < 1:
                raise ConfigError("loss.cb_beta must be in [0, 1)")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    if np.isnan(logits).any():
        raise DataError("NaN in logits")
    top = logits.max(axis=1, keepdims=True)
    if np.isneginf(top).any():
        raise DataError("a row of logits is entirely -inf")
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check(logits, labels, weights):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DataError(f"logits must be [N, C], got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"labels must have shape ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if weights is None:
        w = np.ones(n, dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)
        if w.shape != (n,):
            raise DataError(f"weights must have shape ({n},), got {w.shape}")
        if (w < 0).any():
            raise DataError("sample weights must be non-negative")
    return logits, labels.astype(np.int64), w


def cross_entropy(logits, labels, weights=None):
    logits, labels, w = _check(logits, labels, weights)
    n = len(labels)
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = -(w * logp[rows, labels]).sum() / n
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad *= (w / n)[:, None]
    return float(loss), grad.astype(logits.dtype)


def focal_loss(logits, labels, focal_exponent, weights=None):
    """Focal loss ``-(1 - p)^g log p`` with ``p`` the true-class probability."""
    if not np.isfinite(focal_exponent) or focal_exponent < 0:
        raise ConfigError("focal_exponent must be finite and >= 0")
    if focal_exponent == 0:
        return cross_entropy(logits, labels, weights)
    logits, labels, w = _check(logits, labels, weights)
    n = len(labels)
    logp_all = _log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, labels]
    p = probs[rows, labels]
    q = np.clip(1.0 - p, 0.0, None)
    g = focal_exponent
    per_sample = -(q**g) * logp
    # dl/dp * p, written to stay finite as p -> 1 for g < 1
    with np.errstate(divide="ignore", invalid="ignore"):
        first = np.where(q > 0, g * q ** (g - 1) * p * logp, 0.0)
    dl_dp_times_p = first - q**g
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1
    grad = dl_dp_times_p[:, None] * (onehot - probs)
    grad *= (w / n)[:, None]
    loss = (w * per_sample).sum() / n
    return float(loss), grad.astype(logits.dtype)


def class_balanced_weights(counts, beta: float) -> np.ndarray:
    """Per-class weights ``1 / E_n`` with ``E_n = (1 - beta^n) / (1 - beta)``.

    Normalised to sum to the number of classes.
    """
    counts = np.asarray(counts)
    if counts.ndim != 1 or len(counts) == 0:
        raise DataError("counts must be a non-empty 1-D sequence")
    if (counts < 1).any():
        raise DataError("every class count must be >= 1")
    if not 0 <= beta < 1:
        raise ConfigError(f"beta must be in [0, 1), got {beta}")
    effective = (1.0 - np.power(beta, counts.astype(np.float64))) / (1.0 - beta)
    raw = 1.0 / effective
    return raw * len(counts) / raw.sum()


def compute_loss(logits, labels, cfg: LossConfig, weights=None):
    """Dispatch on ``cfg.kind``; extra ``weights`` multiply any class weights."""
    if cfg.kind == "cross_entropy":
        return cross_entropy(logits, labels, weights)
    if cfg.kind == "focal":
        return focal_loss(logits, labels, cfg.focal_exponent, weights)
    class_w = class_balanced_weights(cfg.per_class_counts, cfg.cb_beta)
    labels = np.asarray(labels)
    if labels.size and labels.max() >= len(class_w):
        raise DataError(f"label {labels.max()} has no class count")
    w = class_w[labels.astype(np.int64)]
    if weights is not None:
        w = w * np.asarray(weights)
    # focal_exponent > 0 turns the arm into class-balanced focal loss
    return focal_loss(logits, labels, cfg.focal_exponent, w)
