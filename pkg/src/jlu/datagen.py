"""Seeded synthetic datasets with controllable label correlations.

Features follow an additive-centroid Gaussian model::

    x = sum_t signal_scale_t * centroid_t[label_t] + noise_sigma * eps

with ``eps`` standard normal. Labels are drawn from a joint probability table
over all attribute tuples, so a table with off-diagonal zeros produces an
extreme bias and an independent uniform table produces unbiased data.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .model import ConfigurationError

ORACLE_SEED = 20180101
ORACLE_SAMPLES = 100_000


class DatasetParseError(ValueError):
    pass


@dataclass
class AttributeSpec:
    name: str
    n_classes: int
    centroids: np.ndarray  # (n_classes, input_dim)
    signal_scale: float = 1.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_classes": self.n_classes,
            "centroids": self.centroids.tolist(),
            "signal_scale": self.signal_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSpec":
        return cls(d["name"], int(d["n_classes"]), np.asarray(d["centroids"], dtype=np.float64), float(d["signal_scale"]))


@dataclass
class SyntheticSpec:
    """Generative description of a dataset; attribute 0 is the primary task."""

    input_dim: int
    tasks: list[AttributeSpec]
    noise_sigma: float
    train_joint: np.ndarray
    test_joint: np.ndarray | None = None  # None -> independent uniform

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(t.n_classes for t in self.tasks)

    @property
    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def joint(self, split: str) -> np.ndarray:
        if split == "train":
            return self.train_joint
        if split == "test":
            return self.test_joint if self.test_joint is not None else independent_joint(self.shape)
        raise ConfigurationError(f"unknown split {split!r}")

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigurationError("a synthetic spec needs at least the primary attribute")
        for t in self.tasks:
            if t.centroids.shape != (t.n_classes, self.input_dim):
                raise ConfigurationError(
                    f"attribute {t.name!r}: centroids have shape {t.centroids.shape}, expected {(t.n_classes, self.input_dim)}"
                )
            if not np.all(np.isfinite(t.centroids)):
                raise ConfigurationError(f"attribute {t.name!r}: non-finite centroids")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")
        for split in ("train", "test"):
            _check_table(self.joint(split), self.shape, split)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "tasks": [t.to_dict() for t in self.tasks],
            "noise_sigma": self.noise_sigma,
            "train_joint": self.train_joint.tolist(),
            "test_joint": None if self.test_joint is None else self.test_joint.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        test = d.get("test_joint")
        spec = cls(
            int(d["input_dim"]),
            [AttributeSpec.from_dict(t) for t in d["tasks"]],
            float(d["noise_sigma"]),
            np.asarray(d["train_joint"], dtype=np.float64),
            None if test is None else np.asarray(test, dtype=np.float64),
        )
        spec.validate()
        return spec


@dataclass
class LabeledDataset:
    x: np.ndarray
    primary_labels: np.ndarray
    spurious_labels: dict[str, np.ndarray] = field(default_factory=dict)
    class_counts: dict[str, int] = field(default_factory=dict)
    primary_name: str = "primary"

    def __post_init__(self) -> None:
        n = self.x.shape[0]
        for name, y in [(self.primary_name, self.primary_labels), *self.spurious_labels.items()]:
            if y.shape != (n,):
                raise ConfigurationError(f"label vector {name!r} has shape {y.shape}, expected ({n},)")
            k = self.class_counts.get(name)
            if k is not None and n and (y.min() < 0 or y.max() >= k):
                raise ConfigurationError(f"labels of {name!r} fall outside [0, {k})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def task_names(self) -> list[str]:
        return list(self.spurious_labels)

    def labels(self, task: str) -> np.ndarray:
        if task == self.primary_name:
            return self.primary_labels
        return self.spurious_labels[task]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(
            self.x[idx],
            self.primary_labels[idx],
            {k: v[idx] for k, v in self.spurious_labels.items()},
            dict(self.class_counts),
            self.primary_name,
        )

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.primary_name == other.primary_name
            and self.class_counts == other.class_counts
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.primary_labels, other.primary_labels)
            and self.spurious_labels.keys() == other.spurious_labels.keys()
            and all(np.array_equal(v, other.spurious_labels[k]) for k, v in self.spurious_labels.items())
        )


def _check_table(table: np.ndarray, shape: tuple[int, ...], what: str) -> None:
    if table.shape != shape:
        raise ConfigurationError(f"{what} joint table has shape {table.shape}, expected {shape}")
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise ConfigurationError(f"{what} joint table has negative or non-finite entries")
    if abs(table.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"{what} joint table sums to {table.sum():.12g}, not 1")


def independent_joint(shape: Sequence[int]) -> np.ndarray:
    return np.full(tuple(shape), 1.0 / math.prod(shape))


def biased_joint(rho: float, k_primary: int, k_spurious: int, mapping: Sequence[int] | None = None) -> np.ndarray:
    """Mixture of a deterministic primary->spurious pairing and independence.

    ``P = rho * pairing / k_primary + (1 - rho) * uniform``. Without a
    ``mapping`` the pairing is the diagonal and the class counts must agree;
    ``mapping[i]`` names the spurious class paired with primary class ``i``.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigurationError(f"rho must lie in [0, 1], got {rho}")
    if mapping is None:
        if k_primary != k_spurious:
            raise ConfigurationError("diagonal pairing needs equal class counts; pass an explicit mapping")
        mapping = list(range(k_primary))
    if len(mapping) != k_primary or any(not 0 <= m < k_spurious for m in mapping):
        raise ConfigurationError(f"mapping {list(mapping)} invalid for {k_primary}x{k_spurious}")
    pairing = np.zeros((k_primary, k_spurious))
    pairing[np.arange(k_primary), list(mapping)] = 1.0
    return rho * pairing / k_primary + (1.0 - rho) / (k_primary * k_spurious)


def extreme_bias_joint(variant: str, k_primary: int, k_spurious: int = 2, ordinal: str = "primary") -> np.ndarray:
    """Disjoint-support table for the EB1/EB2 scenarios.

    The ordinal attribute is split into a low half, a middle buffer and a high
    half; the buffer gets no mass. In EB1 the binary class 0 co-occurs only
    with the low half and class 1 only with the high half, EB2 swaps them.
    ``ordinal`` selects which axis ("primary" or "spurious") is the ordinal
    one; the table is always indexed ``[primary, spurious]``.
    """
    if variant not in ("EB1", "EB2"):
        raise ConfigurationError(f"unknown extreme-bias variant {variant!r}")
    if ordinal == "primary":
        n_ord, n_bin = k_primary, k_spurious
    elif ordinal == "spurious":
        n_ord, n_bin = k_spurious, k_primary
    else:
        raise ConfigurationError(f"ordinal must be 'primary' or 'spurious', got {ordinal!r}")
    if n_ord < 3:
        raise ConfigurationError(f"the ordinal attribute needs at least 3 classes (low, buffer, high), got {n_ord}")
    if n_bin != 2:
        raise ConfigurationError(f"the binary attribute must have 2 classes, got {n_bin}")
    half = (n_ord - 1) // 2
    low = range(half)
    high = range(n_ord - half, n_ord)
    table = np.zeros((n_ord, 2))
    lo_cls, hi_cls = (0, 1) if variant == "EB1" else (1, 0)
    for i in low:
        table[i, lo_cls] = 1.0
    for i in high:
        table[i, hi_cls] = 1.0
    table /= table.sum()
    return table if ordinal == "primary" else table.T.copy()


def ladder_centroids(n_classes: int, direction: np.ndarray) -> np.ndarray:
    """Evenly spaced centroids along one unit direction, unit spacing, centered."""
    offsets = np.arange(n_classes) - (n_classes - 1) / 2.0
    return offsets[:, None] * direction[None, :]


def orthogonal_directions(n: int, input_dim: int, seed: int) -> np.ndarray:
    if n > input_dim:
        raise ConfigurationError(f"cannot place {n} orthogonal directions in {input_dim} dimensions")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((input_dim, n)))
    return q.T


def make_spec(
    tasks: Sequence[tuple[str, int, float]],
    train_joint: np.ndarray,
    input_dim: int = 16,
    noise_sigma: float = 0.5,
    geometry_seed: int = 0,
    test_joint: np.ndarray | None = None,
) -> SyntheticSpec:
    """Spec whose attributes sit on mutually orthogonal centroid ladders.

    ``tasks`` lists ``(name, n_classes, signal_scale)``, primary first.
    """
    dirs = orthogonal_directions(len(tasks), input_dim, geometry_seed)
    attrs = [AttributeSpec(name, k, ladder_centroids(k, d), scale) for (name, k, scale), d in zip(tasks, dirs)]
    spec = SyntheticSpec(input_dim, attrs, noise_sigma, np.asarray(train_joint, dtype=np.float64), test_joint)
    spec.validate()
    return spec


def _features(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = labels.shape[0]
    x = np.zeros((n, spec.input_dim))
    for j, t in enumerate(spec.tasks):
        x += t.signal_scale * t.centroids[labels[:, j]]
    return x + spec.noise_sigma * rng.standard_normal((n, spec.input_dim))


def _to_dataset(spec: SyntheticSpec, labels: np.ndarray, x: np.ndarray) -> LabeledDataset:
    names = spec.task_names
    return LabeledDataset(
        x,
        labels[:, 0].copy(),
        {name: labels[:, j].copy() for j, name in enumerate(names) if j > 0},
        {t.name: t.n_classes for t in spec.tasks},
        names[0],
    )


def sample_dataset(spec: SyntheticSpec, n: int, split: str = "train", seed: int = 0, joint: np.ndarray | None = None) -> LabeledDataset:
    """Draw ``n`` labelled samples from the split's joint table (or ``joint``)."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    spec.validate()
    table = spec.joint(split) if joint is None else np.asarray(joint, dtype=np.float64)
    _check_table(table, spec.shape, "requested")
    rng = np.random.default_rng(seed)
    flat = rng.choice(table.size, size=n, p=table.ravel() / table.sum())
    labels = np.stack(np.unravel_index(flat, table.shape), axis=1).astype(np.int64)
    return _to_dataset(spec, labels, _features(spec, labels, rng))


def balanced_test(spec: SyntheticSpec, n: int, seed: int = 0) -> LabeledDataset:
    """Exactly ``n / prod(K)`` samples in every label cell, shuffled."""
    spec.validate()
    cells = math.prod(spec.shape)
    if n % cells:
        raise ConfigurationError(f"n={n} is not divisible by the {cells} label cells")
    rng = np.random.default_rng(seed)
    tuples = np.array(list(itertools.product(*(range(k) for k in spec.shape))), dtype=np.int64)
    labels = np.repeat(tuples, n // cells, axis=0)
    labels = labels[rng.permutation(n)]
    return _to_dataset(spec, labels, _features(spec, labels, rng))


def bayes_oracle_accuracy(
    spec: SyntheticSpec, task: str, split: str = "test", n: int = ORACLE_SAMPLES, seed: int = ORACLE_SEED
) -> float:
    """Monte-Carlo accuracy of the Bayes-optimal classifier for ``task``.

    Samples come from ``split``'s joint; the posterior is computed exactly
    from the Gaussian class-conditional densities by enumerating every label
    tuple. With ``noise_sigma == 0`` the posterior is a nearest-mean rule.
    """
    names = spec.task_names
    if task not in names:
        raise ConfigurationError(f"unknown task {task!r}; known: {names}")
    t_idx = names.index(task)
    table = spec.joint(split)
    data = sample_dataset(spec, n, split, seed)
    truth = data.labels(task)

    tuples = np.array(list(itertools.product(*(range(k) for k in spec.shape))), dtype=np.int64)
    prior = table.ravel()
    keep = prior > 0
    tuples, prior = tuples[keep], prior[keep]
    means = np.zeros((len(tuples), spec.input_dim))
    for j, t in enumerate(spec.tasks):
        means += t.signal_scale * t.centroids[tuples[:, j]]

    # squared distance of every sample to every cell mean
    d2 = (
        (data.x**2).sum(axis=1, keepdims=True)
        - 2.0 * data.x @ means.T
        + (means**2).sum(axis=1)[None, :]
    )
    k = spec.shape[t_idx]
    if spec.noise_sigma == 0:
        nearest = np.argmin(d2, axis=1)
        pred = tuples[nearest, t_idx]
    else:
        log_post = np.log(prior)[None, :] - d2 / (2.0 * spec.noise_sigma**2)
        per_class = np.full((n, k), -np.inf)
        for c in range(k):
            cols = tuples[:, t_idx] == c
            if cols.any():
                per_class[:, c] = logsumexp(log_post[:, cols], axis=1)
        pred = np.argmax(per_class, axis=1)
    return float(np.mean(pred == truth))


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def export_dataset(ds: LabeledDataset, path) -> None:
    """Write ``f0..f{d-1}, y_primary, y_<task>...`` with 17 significant digits."""
    d = ds.x.shape[1]
    header = [f"f{i}" for i in range(d)] + ["y_primary"] + [f"y_{t}" for t in ds.task_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            row = [f"{v:.17g}" for v in ds.x[i]]
            row.append(str(int(ds.primary_labels[i])))
            row += [str(int(ds.spurious_labels[t][i])) for t in ds.task_names]
            w.writerow(row)


def import_dataset(path, class_counts: dict[str, int] | None = None, primary_name: str = "primary") -> LabeledDataset:
    """Read a dataset CSV.

    Class counts default to ``max label + 1`` per column; pass ``class_counts``
    (e.g. from a data manifest) when the top class may be absent.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        raise DatasetParseError(f"{path}:1: empty file")
    header = rows[0]
    feat = [h for h in header if h.startswith("f") and h[1:].isdigit()]
    if not feat or feat != [f"f{i}" for i in range(len(feat))] or header[: len(feat)] != feat:
        raise DatasetParseError(f"{path}:1: feature columns must be f0..f{{d-1}}")
    label_cols = header[len(feat):]
    if label_cols[:1] != ["y_primary"]:
        raise DatasetParseError(f"{path}:1: missing label column y_primary after the features")
    if not all(c.startswith("y_") and len(c) > 2 for c in label_cols):
        raise DatasetParseError(f"{path}:1: unexpected columns {label_cols}")
    tasks = [c[2:] for c in label_cols[1:]]
    d = len(feat)
    body = rows[1:]
    if not body:
        raise DatasetParseError(f"{path}:2: no data rows")
    x = np.empty((len(body), d))
    y = np.empty((len(body), len(label_cols)), dtype=np.int64)
    for r, row in enumerate(body):
        lineno = r + 2
        if len(row) != len(header):
            raise DatasetParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            x[r] = [float(v) for v in row[:d]]
            y[r] = [int(v) for v in row[d:]]
        except ValueError as exc:
            raise DatasetParseError(f"{path}:{lineno}: {exc}") from exc
    counts = {}
    for name, col in [(primary_name, y[:, 0]), *((t, y[:, j + 1]) for j, t in enumerate(tasks))]:
        if class_counts and name in class_counts:
            counts[name] = int(class_counts[name])
        else:
            counts[name] = int(col.max()) + 1
    return LabeledDataset(x, y[:, 0], {t: y[:, j + 1] for j, t in enumerate(tasks)}, counts, primary_name)
