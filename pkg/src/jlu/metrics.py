"""Accuracy variants, unlearning scores, group KL and embedding projection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import DataError

KL_SMOOTHING = 1e-6


@dataclass
class TaskProbe:
    probe_accuracy: float
    rescaled_score: float
    percent_unlearned: float | None = None


@dataclass
class MetricsRecord:
    """One evaluation snapshot of a network on held-out data."""

    epoch: int
    primary_accuracy: float
    primary_adjacent_accuracy: float
    loss_primary: float
    loss_confusion: float
    probes: dict[str, TaskProbe] = field(default_factory=dict)
    kl: dict[str, float] = field(default_factory=dict)  # column suffix "<a>_<b>" -> KL

    def values(self) -> list[float]:
        out = [self.primary_accuracy, self.primary_adjacent_accuracy, self.loss_primary, self.loss_confusion]
        for p in self.probes.values():
            out += [p.probe_accuracy, p.rescaled_score]
        return out + list(self.kl.values())


def mean_class_accuracy(preds, labels, n_classes: int) -> float:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    per_class = []
    for k in range(n_classes):
        mask = labels == k
        if not mask.any():
            raise DataError(f"class {k} absent from labels; mean-class accuracy undefined")
        per_class.append(np.mean(preds[mask] == k))
    return float(np.mean(per_class))


def per_class_accuracy(preds, labels, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    return np.array([np.mean(preds[labels == k] == k) if (labels == k).any() else np.nan for k in range(n_classes)])


def adjacent_accuracy(preds, labels, n_classes: int | None = None) -> float:
    """Fraction of predictions within one ordinal class of the truth."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    return float(np.mean(np.abs(preds - labels) <= 1))


def rescaled_score(mean_class_error: float, n_classes: int) -> float:
    """``1 - e / e_max`` with ``e_max = 1 - 1/K``: 1 is perfect, 0 is chance."""
    if n_classes < 2:
        raise DataError("rescaling needs at least 2 classes")
    return 1.0 - mean_class_error / (1.0 - 1.0 / n_classes)


def percent_unlearned(baseline_score: float, blind_score: float) -> float | None:
    """Relative drop of a rescaled probe score toward chance, in percent.

    Returns ``None`` when the baseline does not beat chance.
    """
    if not baseline_score > 0:
        return None
    return min(100.0, 100.0 * (baseline_score - blind_score) / baseline_score)


def prediction_distribution(preds, group_mask, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    mask = np.asarray(group_mask, dtype=bool).ravel()
    if not mask.any():
        raise DataError("empty group")
    counts = np.bincount(preds[mask], minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


def kl_divergence(p, q, smoothing: float = KL_SMOOTHING) -> float:
    """``sum p ln(p/q)`` with ``q`` additively smoothed and renormalized."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise DataError(f"distribution length mismatch: {p.size} vs {q.size}")
    if np.array_equal(p, q):
        return 0.0
    q = (q + smoothing) / (q + smoothing).sum()
    nz = p > 0
    return float(max(0.0, np.sum(p[nz] * np.log(p[nz] / q[nz]))))


def group_kl(preds, groups, n_classes: int, n_groups: int) -> dict[tuple[int, int], float]:
    """KL(group a || group b) of prediction histograms for every pair a < b."""
    dists = [prediction_distribution(preds, np.asarray(groups) == g, n_classes) for g in range(n_groups)]
    return {(a, b): kl_divergence(dists[a], dists[b]) for a in range(n_groups) for b in range(a + 1, n_groups)}


class DegenerateInputError(ValueError):
    pass


def project_embeddings(embeddings) -> np.ndarray:
    """Scores on the top-2 principal components.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2 or e.shape[1] < 2:
        raise DegenerateInputError(f"need at least 2 samples and 2 dimensions, got shape {e.shape}")
    centered = e - e.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = s.max(initial=0.0) * max(e.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    if rank < 2:
        raise DegenerateInputError(f"embeddings have rank {rank}; need rank >= 2 for a 2-D projection")
    comps = vt[:2]
    for i in range(2):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def best_threshold_accuracy(scores, labels) -> float:
    """Best mean-class accuracy of a 1-D threshold rule for binary labels."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    n1 = np.sum(y == 1)
    n0 = y.size - n1
    if n0 == 0 or n1 == 0:
        raise DataError("threshold accuracy needs both classes")
    # predict 1 above the cut; cut i means first i samples are predicted 0
    zeros_below = np.concatenate([[0], np.cumsum(y == 0)])
    ones_below = np.concatenate([[0], np.cumsum(y == 1)])
    valid = np.concatenate([[True], s[1:] != s[:-1], [True]])
    acc_up = 0.5 * (zeros_below / n0 + (n1 - ones_below) / n1)
    acc = np.maximum(acc_up, 1.0 - acc_up)
    return float(acc[valid].max())


def export_embeddings(path, embeddings, primary_labels, spurious_labels: dict[str, np.ndarray]) -> None:
    """CSV with columns ``pc1, pc2, e0..e{d-1}, y_primary, y_<task>...``."""
    e = np.asarray(embeddings, dtype=np.float64)
    pcs = project_embeddings(e)
    header = ["pc1", "pc2"] + [f"e{i}" for i in range(e.shape[1])] + ["y_primary"] + [f"y_{t}" for t in spurious_labels]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(e.shape[0]):
            row = [f"{v:.17g}" for v in pcs[i]] + [f"{v:.17g}" for v in e[i]]
            row.append(str(int(primary_labels[i])))
            row += [str(int(v[i])) for v in spurious_labels.values()]
            w.writerow(row)


def chance_level(n_classes: int) -> float:
    return 1.0 / n_classes


def is_finite_record(record: MetricsRecord) -> bool:
    return all(math.isfinite(v) for v in record.values())
