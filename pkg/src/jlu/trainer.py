"""Joint learning and unlearning, a primary-only baseline, and linear probes.

Each JLU epoch first fits the spurious-attribute heads to the current
representation (the representation and primary head are held fixed), then
makes one pass over the primary data updating the representation and the
primary head on ``L_p + alpha * L_conf`` with the spurious heads held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from . import losses
from .autodiff import Tensor, backward, constant, sgd_step, zero_grads
from .datagen import LabeledDataset
from .losses import DataError
from .metrics import (
    MetricsRecord,
    TaskProbe,
    adjacent_accuracy,
    group_kl,
    mean_class_accuracy,
    rescaled_score,
)
from .model import (
    Architecture,
    ConfigurationError,
    NetworkBundle,
    TaskSpec,
    forward_features,
    forward_head,
    init_bundle,
    params_of,
)

logger = logging.getLogger(__name__)

# stream keys for np.random.default_rng([seed, key, ...])
_ORDER_STREAM = 1
_SECONDARY_STREAM = 2
_PROBE_STREAM = 3


@dataclass
class InnerPolicy:
    max_steps: int = 200
    plateau_tol: float = 1e-4
    plateau_patience: int = 5


@dataclass
class TrainConfig:
    alpha: float = losses.DEFAULT_ALPHA
    betas: list[float] | None = None  # None -> 1.0 per spurious task
    base_lr: float = 1e-4
    head_lr_boost: float = 10.0
    epochs: int = 10
    batch_size: int = 64
    inner: InnerPolicy = field(default_factory=InnerPolicy)
    confusion_variant: str = "ce"
    kl_direction: str = "p||u"
    seed: int = 0
    hidden: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    frozen_layers: tuple[int, ...] = ()
    class_weighting: bool = True
    reinit_secondary: bool = False

    def validate(self) -> None:
        if self.base_lr <= 0 or self.head_lr_boost <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.inner.max_steps < 1:
            raise ConfigurationError("inner.max_steps must be at least 1")
        if self.inner.plateau_patience < 1 or self.inner.plateau_tol < 0:
            raise ConfigurationError("inner plateau settings must be positive")
        if self.alpha < 0 or (self.betas is not None and any(b < 0 for b in self.betas)):
            raise ConfigurationError("alpha and betas must be nonnegative")
        if self.confusion_variant not in ("ce", "kl"):
            raise ConfigurationError(f"confusion_variant must be 'ce' or 'kl', got {self.confusion_variant!r}")
        if self.kl_direction not in ("p||u", "u||p"):
            raise ConfigurationError(f"kl_direction must be 'p||u' or 'u||p', got {self.kl_direction!r}")

    @property
    def head_lr(self) -> float:
        return self.base_lr * self.head_lr_boost


@dataclass
class TrainState:
    bundle: NetworkBundle
    config: TrainConfig
    epoch: int = 0
    history: list[MetricsRecord] = field(default_factory=list)
    rng: np.random.Generator | None = None
    primary_weights: np.ndarray | None = None
    secondary_weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.rng is None:
            self.rng = np.random.default_rng([self.config.seed, _ORDER_STREAM])

    def betas(self) -> list[float]:
        m = len(self.bundle.secondary_heads)
        betas = self.config.betas if self.config.betas is not None else [losses.DEFAULT_BETA] * m
        if len(betas) != m:
            raise ConfigurationError(f"{len(betas)} betas for {m} spurious tasks")
        return list(betas)


@dataclass
class InnerReport:
    steps: int
    final_loss: float
    converged: bool


@dataclass
class StepReport:
    loss_primary: float
    loss_confusion: float


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def embed(bundle: NetworkBundle, x: np.ndarray) -> np.ndarray:
    return forward_features(bundle, x).values


def predict(bundle: NetworkBundle, x: np.ndarray) -> np.ndarray:
    emb = forward_features(bundle, x)
    return np.argmax(forward_head(bundle.primary_head, emb).values, axis=1)


def _weights_for(labels: np.ndarray, k: int, enabled: bool) -> np.ndarray:
    return losses.class_weights_from(labels, k) if enabled else np.ones(k)


class _BatchCycler:
    """Endless minibatches from one dataset, reshuffled on every pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            head = self._order[self._pos:]
            self._order = self.rng.permutation(self.n)
            need = min(self.batch_size, self.n) - head.size
            self._pos = need
            return np.concatenate([head, self._order[:need]])
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def build_arch(config: TrainConfig, primary: LabeledDataset, secondaries: Mapping[str, LabeledDataset]) -> Architecture:
    return Architecture(
        input_dim=primary.x.shape[1],
        primary=TaskSpec(primary.primary_name, primary.class_counts[primary.primary_name]),
        hidden=tuple(config.hidden),
        embedding_dim=config.embedding_dim,
        secondary=[TaskSpec(name, ds.class_counts[name]) for name, ds in secondaries.items()],
        frozen_layers=tuple(config.frozen_layers),
    )


def _check_inputs(primary: LabeledDataset, secondaries: Mapping[str, LabeledDataset]) -> None:
    d = primary.x.shape[1]
    if len(primary) == 0:
        raise ConfigurationError("primary dataset is empty")
    for name, ds in secondaries.items():
        if len(ds) == 0:
            raise ConfigurationError(f"secondary dataset for {name!r} is empty")
        if ds.x.shape[1] != d:
            raise ConfigurationError(f"secondary dataset {name!r} has {ds.x.shape[1]} features, primary has {d}")
        if name not in ds.spurious_labels:
            raise ConfigurationError(f"secondary dataset has no labels for task {name!r}")
        if name not in ds.class_counts:
            raise ConfigurationError(f"secondary dataset has no class count for task {name!r}")


# ---------------------------------------------------------------------------
# algorithm steps
# ---------------------------------------------------------------------------


def train_secondary_inner(state: TrainState, secondaries: Mapping[str, LabeledDataset]) -> InnerReport:
    """Fit every spurious head to the frozen current representation.

    Full-batch gradient descent on ``L_s = sum_m beta_m L_m`` at the head
    learning rate. Stops once the relative improvement of ``L_s`` stays below
    ``plateau_tol`` for ``plateau_patience`` consecutive steps, or after
    ``max_steps`` steps.
    """
    bundle, cfg = state.bundle, state.config
    if not bundle.secondary_heads:
        raise ConfigurationError("no spurious tasks to train")
    if cfg.inner.max_steps < 1:
        raise ConfigurationError("inner.max_steps must be at least 1")
    for head in bundle.secondary_heads:
        ds = secondaries.get(head.task_name)
        if ds is None or len(ds) == 0:
            raise ConfigurationError(f"empty secondary dataset for task {head.task_name!r}")

    betas = state.betas()
    # representation is fixed here, so the embeddings are constants
    embs = [constant(embed(bundle, secondaries[h.task_name].x)) for h in bundle.secondary_heads]
    labels = [secondaries[h.task_name].spurious_labels[h.task_name] for h in bundle.secondary_heads]
    weights = [state.secondary_weights.get(h.task_name) for h in bundle.secondary_heads]
    head_params = params_of(bundle, "all_secondary")

    def loss_value() -> Tensor:
        logits = [forward_head(h, e) for h, e in zip(bundle.secondary_heads, embs)]
        return losses.secondary_classification_loss(logits, labels, betas, weights)

    zero_grads(head_params)
    prev = loss_value()
    flat = 0
    steps = 0
    converged = False
    while steps < cfg.inner.max_steps:
        backward(prev)
        sgd_step(head_params, cfg.head_lr)
        zero_grads(head_params)
        steps += 1
        cur = loss_value()
        before, after = prev.item(), cur.item()
        rel = (before - after) / abs(before) if before != 0 else 0.0
        prev = cur
        flat = flat + 1 if rel < cfg.inner.plateau_tol else 0
        if flat >= cfg.inner.plateau_patience:
            converged = True
            break
    return InnerReport(steps, prev.item(), converged)


def _primary_loss(state: TrainState, x: np.ndarray, y: np.ndarray) -> Tensor:
    emb = forward_features(state.bundle, x)
    logits = forward_head(state.bundle.primary_head, emb)
    return losses.softmax_loss(logits, y, state.primary_weights)


def _confusion(state: TrainState, secondary_batches: Mapping[str, np.ndarray]) -> Tensor:
    logits = [
        forward_head(h, forward_features(state.bundle, secondary_batches[h.task_name]))
        for h in state.bundle.secondary_heads
    ]
    return losses.secondary_confusion_loss(logits, state.config.confusion_variant, state.config.kl_direction)


def _apply_update(state: TrainState, loss: Tensor) -> None:
    bundle, cfg = state.bundle, state.config
    everything = bundle.all_params()
    zero_grads(everything)
    backward(loss)
    sgd_step(params_of(bundle, "repr"), cfg.base_lr)
    sgd_step(params_of(bundle, "primary"), cfg.head_lr)
    zero_grads(everything)


def primary_step(state: TrainState, x: np.ndarray, y: np.ndarray) -> StepReport:
    """One SGD step on the primary loss alone."""
    loss = _primary_loss(state, x, y)
    _apply_update(state, loss)
    return StepReport(loss.item(), 0.0)


def joint_step(
    state: TrainState,
    x: np.ndarray,
    y: np.ndarray,
    secondary_batches: Mapping[str, np.ndarray],
    alpha: float | None = None,
) -> StepReport:
    """One SGD step on ``L_p + alpha * L_conf`` for the representation and primary head.

    ``secondary_batches`` maps task name to the feature rows of its current
    batch. Spurious heads are not updated.
    """
    alpha = state.config.alpha if alpha is None else alpha
    lp = _primary_loss(state, x, y)
    if not state.bundle.secondary_heads:
        _apply_update(state, lp)
        return StepReport(lp.item(), 0.0)
    conf = _confusion(state, secondary_batches)
    _apply_update(state, losses.joint_loss(lp, conf, alpha))
    return StepReport(lp.item(), conf.item())


# ---------------------------------------------------------------------------
# probes and evaluation
# ---------------------------------------------------------------------------


def _stratified_split(labels: np.ndarray, n_classes: int, rng: np.random.Generator, train_fraction: float):
    train, test = [], []
    for k in range(n_classes):
        idx = np.flatnonzero(labels == k)
        if idx.size < 2:
            raise DataError(f"class {k} has {idx.size} samples; a probe needs at least 2 per class")
        idx = rng.permutation(idx)
        cut = min(max(1, int(round(idx.size * train_fraction))), idx.size - 1)
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def probe_train(embeddings, labels, n_classes: int, seed: int = 0, train_fraction: float = 0.5) -> float:
    """Held-out mean-class accuracy of a fresh linear classifier on frozen features.

    The split is stratified per class; features are standardized with the
    training half's statistics and a multinomial logistic regression is fit to
    convergence.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    rng = np.random.default_rng(seed)
    tr, te = _stratified_split(labels, n_classes, rng, train_fraction)
    mu = emb[tr].mean(axis=0)
    sd = emb[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    clf = LogisticRegression(C=10.0, max_iter=2000, tol=1e-8)
    clf.fit((emb[tr] - mu) / sd, labels[tr])
    preds = clf.predict((emb[te] - mu) / sd)
    return mean_class_accuracy(preds, labels[te], n_classes)


def kl_column(task: str, a: int, b: int) -> str:
    return f"{task}{a}_{task}{b}"


def evaluate(
    bundle: NetworkBundle,
    data: LabeledDataset,
    epoch: int = 0,
    probe_seed: int = 0,
    loss_primary: float = 0.0,
    loss_confusion: float = 0.0,
    probe_tasks: Sequence[str] | None = None,
) -> MetricsRecord:
    """Primary accuracies, per-task probes and group KLs on held-out data."""
    emb = embed(bundle, data.x)
    preds = np.argmax(forward_head(bundle.primary_head, constant(emb)).values, axis=1)
    k_p = data.class_counts[data.primary_name]
    record = MetricsRecord(
        epoch=epoch,
        primary_accuracy=mean_class_accuracy(preds, data.primary_labels, k_p),
        primary_adjacent_accuracy=adjacent_accuracy(preds, data.primary_labels, k_p),
        loss_primary=loss_primary,
        loss_confusion=loss_confusion,
    )
    tasks = data.task_names if probe_tasks is None else list(probe_tasks)
    for j, task in enumerate(tasks):
        if task not in data.spurious_labels:
            raise ConfigurationError(f"dataset has no labels for task {task!r}")
        k = data.class_counts[task]
        acc = probe_train(emb, data.spurious_labels[task], k, seed=probe_seed + j)
        record.probes[task] = TaskProbe(acc, rescaled_score(1.0 - acc, k))
    for task in tasks:
        k = data.class_counts[task]
        for (a, b), v in group_kl(preds, data.spurious_labels[task], k_p, k).items():
            record.kl[kl_column(task, a, b)] = v
    return record


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _prepare(config: TrainConfig, primary: LabeledDataset, secondaries: Mapping[str, LabeledDataset]) -> TrainState:
    config.validate()
    _check_inputs(primary, secondaries)
    bundle = init_bundle(build_arch(config, primary, secondaries), config.seed)
    state = TrainState(bundle, config)
    state.betas()
    k_p = primary.class_counts[primary.primary_name]
    state.primary_weights = _weights_for(primary.primary_labels, k_p, config.class_weighting)
    for name, ds in secondaries.items():
        state.secondary_weights[name] = _weights_for(ds.spurious_labels[name], ds.class_counts[name], config.class_weighting)
    return state


def _run(
    state: TrainState,
    primary: LabeledDataset,
    secondaries: Mapping[str, LabeledDataset],
    eval_data: LabeledDataset | None,
) -> TrainState:
    cfg = state.config
    cyclers = {
        name: _BatchCycler(len(ds), cfg.batch_size, np.random.default_rng([cfg.seed, _SECONDARY_STREAM, m]))
        for m, (name, ds) in enumerate(secondaries.items())
    }
    use_jlu = bool(state.bundle.secondary_heads)
    n = len(primary)
    for epoch in range(1, cfg.epochs + 1):
        if use_jlu:
            if cfg.reinit_secondary:
                fresh = init_bundle(state.bundle.arch, cfg.seed + epoch)
                state.bundle.secondary_heads = fresh.secondary_heads
            report = train_secondary_inner(state, secondaries)
            logger.debug("epoch %d inner loop: %d steps, L_s=%.6f", epoch, report.steps, report.final_loss)
        order = state.rng.permutation(n)
        lp_sum = lc_sum = 0.0
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = primary.x[idx], primary.primary_labels[idx]
            if use_jlu:
                batches = {name: secondaries[name].x[c.next()] for name, c in cyclers.items()}
                step = joint_step(state, x, y, batches)
            else:
                step = primary_step(state, x, y)
            lp_sum += step.loss_primary
            lc_sum += step.loss_confusion
            n_steps += 1
        state.epoch = epoch
        if eval_data is not None:
            rec = evaluate(
                state.bundle,
                eval_data,
                epoch,
                probe_seed=int(np.random.default_rng([cfg.seed, _PROBE_STREAM, epoch]).integers(2**31)),
                loss_primary=lp_sum / n_steps,
                loss_confusion=lc_sum / n_steps,
            )
            state.history.append(rec)
            logger.info(
                "epoch %d: primary_acc=%.4f %s",
                epoch,
                rec.primary_accuracy,
                " ".join(f"probe_{t}={p.probe_accuracy:.4f}" for t, p in rec.probes.items()),
            )
    return state


def run_jlu(
    config: TrainConfig,
    primary: LabeledDataset,
    secondaries: Mapping[str, LabeledDataset] | None = None,
    eval_data: LabeledDataset | None = None,
) -> tuple[NetworkBundle, list[MetricsRecord]]:
    """Train with joint learning and unlearning.

    ``secondaries`` maps each spurious task name to a dataset carrying that
    task's labels; it may be the primary training set itself or a separate
    sample. With no spurious tasks this reduces to :func:`run_baseline`.
    """
    secondaries = dict(secondaries or {})
    state = _prepare(config, primary, secondaries)
    _run(state, primary, secondaries, eval_data)
    return state.bundle, state.history


def run_baseline(
    config: TrainConfig, primary: LabeledDataset, eval_data: LabeledDataset | None = None
) -> tuple[NetworkBundle, list[MetricsRecord]]:
    """Plain SGD on the primary loss."""
    state = _prepare(config, primary, {})
    _run(state, primary, {}, eval_data)
    return state.bundle, state.history
