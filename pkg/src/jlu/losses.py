"""Classification, confusion and aggregate losses.

All losses are per-batch means so that the confusion weight ``alpha`` and the
per-task weights ``betas`` do not depend on batch size.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ContractError, Tensor, constant, log_softmax_rows, mul, scale, softmax_rows, sum_all

DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 1.0


class DataError(ValueError):
    """Raised on labels or class statistics that violate a precondition."""


def _check_labels(labels, n_classes: int, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != n_rows:
        raise DataError(f"{labels.shape[0]} labels for a batch of {n_rows}")
    if n_rows == 0:
        raise DataError("empty batch")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def class_weights_from(labels, n_classes: int) -> np.ndarray:
    """Inverse relative class frequency, normalized to mean 1."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DataError(f"classes {missing.tolist()} never occur; re-bin or pass explicit weights")
    raw = labels.size / counts
    return raw / raw.mean()


def softmax_loss(logits: Tensor, labels, weights=None) -> Tensor:
    """Class-weighted mean of -log p_y over the batch.

    The weighted terms are divided by the batch size, not by the sum of weights.
    """
    n, k = logits.shape
    labels = _check_labels(labels, k, n)
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise DataError(f"expected {k} class weights, got shape {w.shape}")
    picker = np.zeros((n, k))
    picker[np.arange(n), labels] = -w[labels] / n
    return sum_all(mul(log_softmax_rows(logits), constant(picker)))


def confusion_loss_ce(logits: Tensor) -> Tensor:
    """Cross-entropy between the uniform distribution and the softmax output.

    Batch mean of ``-(1/K) sum_k log p_k``; minimum ``ln K`` at uniform output.
    """
    n, k = logits.shape
    if k < 2:
        raise ContractError("confusion loss needs at least 2 classes")
    return scale(sum_all(log_softmax_rows(logits)), -1.0 / (n * k))


def confusion_loss_kl(logits: Tensor, direction: str = "p||u") -> Tensor:
    """KL divergence between the softmax output and the uniform distribution.

    ``direction="p||u"`` gives ``ln K - H(p)``; ``"u||p"`` gives
    ``CE(u, p) - ln K``, which has the same gradient as :func:`confusion_loss_ce`.
    """
    n, k = logits.shape
    if k < 2:
        raise ContractError("confusion loss needs at least 2 classes")
    if direction == "p||u":
        logp = log_softmax_rows(logits)
        neg_entropy = sum_all(mul(softmax_rows(logits), logp))
        return scale(neg_entropy, 1.0 / n) + constant(np.log(k))
    if direction == "u||p":
        return confusion_loss_ce(logits) + constant(-np.log(k))
    raise ContractError(f"unknown KL direction {direction!r}")


def confusion_loss(logits: Tensor, variant: str = "ce", kl_direction: str = "p||u") -> Tensor:
    if variant == "ce":
        return confusion_loss_ce(logits)
    if variant == "kl":
        return confusion_loss_kl(logits, kl_direction)
    raise ContractError(f"unknown confusion variant {variant!r}")


def secondary_classification_loss(heads_logits: Sequence[Tensor], labels: Sequence, betas: Sequence[float], weights=None) -> Tensor:
    """sum_m beta_m * L_m over the spurious tasks."""
    if len(heads_logits) != len(labels) or len(heads_logits) != len(betas):
        raise ContractError(
            f"got {len(heads_logits)} logits, {len(labels)} label vectors and {len(betas)} betas"
        )
    if not heads_logits:
        raise ContractError("secondary classification loss needs at least one task")
    weights = weights if weights is not None else [None] * len(heads_logits)
    total = None
    for logits, y, beta, w in zip(heads_logits, labels, betas, weights):
        term = scale(softmax_loss(logits, y, w), float(beta))
        total = term if total is None else total + term
    return total


def secondary_confusion_loss(heads_logits: Sequence[Tensor], variant: str = "ce", kl_direction: str = "p||u") -> Tensor:
    """Unweighted mean of the per-task confusion losses."""
    if not heads_logits:
        raise ContractError("no spurious tasks: the confusion term must be skipped, not evaluated")
    total = None
    for logits in heads_logits:
        term = confusion_loss(logits, variant, kl_direction)
        total = term if total is None else total + term
    return scale(total, 1.0 / len(heads_logits))


def joint_loss(primary_loss: Tensor, conf_loss: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise ContractError(f"alpha must be nonnegative, got {alpha}")
    return primary_loss + scale(conf_loss, alpha)
