"""Synthetic counterparts of the three bias-removal experiments.

* ``bias-removal``: an ordinal primary attribute ("age", 4 bins) whose low
  bins co-occur with spurious class 0 and high bins with class 1 at
  correlation ``rho``.
* ``extreme-bias``: a binary primary ("gender") trained on data where the
  ordinal spurious attribute ("age", low/buffer/high) is fully determined by
  it (EB1) or by its flip (EB2), with the buffer bin empty.
* ``multi-attribute``: a primary attribute with several spurious attributes,
  each correlated with the primary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import datagen
from .datagen import LabeledDataset, SyntheticSpec
from .model import ConfigurationError

EXPERIMENTS = ("bias-removal", "extreme-bias", "multi-attribute", "custom")


@dataclass
class DataBundle:
    spec: SyntheticSpec
    train: LabeledDataset
    test: LabeledDataset
    secondary: LabeledDataset


@dataclass
class DataConfig:
    """Dataset recipe: a preset plus overrides, or an explicit spec."""

    preset: str = "bias-removal"
    rho: float = 0.8
    variant: str = "EB1"
    input_dim: int = 16
    noise_sigma: float = 0.5
    primary_scale: float = 1.0
    spurious_scale: float = 2.0
    n_train: int = 4000
    n_test: int = 2000
    n_secondary: int = 2000
    secondary_source: str = "independent"  # "independent" | "train"
    geometry_seed: int = 0
    spec: dict | None = None  # full SyntheticSpec dict for preset "custom"
    extra_tasks: list = field(default_factory=lambda: [["pose", 3], ["origin", 4]])


def conditional_joint(primary_marginal: np.ndarray, conditionals: list[np.ndarray]) -> np.ndarray:
    """``P(p, s_1..s_M) = P(p) * prod_m P(s_m | p)``."""
    table = np.asarray(primary_marginal, dtype=np.float64)
    for cond in conditionals:
        table = table[..., None] * cond.reshape((cond.shape[0],) + (1,) * (table.ndim - 1) + (cond.shape[1],))
    return table / table.sum()


def build_spec(cfg: DataConfig) -> SyntheticSpec:
    if cfg.preset == "bias-removal":
        tasks = [("age", 4, cfg.primary_scale), ("gender", 2, cfg.spurious_scale)]
        joint = datagen.biased_joint(cfg.rho, 4, 2, mapping=[0, 0, 1, 1])
    elif cfg.preset == "extreme-bias":
        tasks = [("gender", 2, cfg.primary_scale), ("age", 3, cfg.spurious_scale)]
        joint = datagen.extreme_bias_joint(cfg.variant, 2, 3, ordinal="spurious")
    elif cfg.preset == "multi-attribute":
        extra = [(str(name), int(k)) for name, k in cfg.extra_tasks]
        tasks = [("age", 4, cfg.primary_scale), ("gender", 2, cfg.spurious_scale)]
        tasks += [(name, k, cfg.spurious_scale) for name, k in extra]
        conds = []
        for _, k, _ in tasks[1:]:
            mapping = [min(k - 1, (i * k) // 4) for i in range(4)]
            pair = datagen.biased_joint(cfg.rho, 4, k, mapping=mapping)
            conds.append(pair / pair.sum(axis=1, keepdims=True))
        joint = conditional_joint(np.full(4, 0.25), conds)
    elif cfg.preset == "custom":
        if cfg.spec is None:
            raise ConfigurationError("preset 'custom' needs an explicit 'spec'")
        return SyntheticSpec.from_dict(cfg.spec)
    else:
        raise ConfigurationError(f"unknown data preset {cfg.preset!r}; choose from {EXPERIMENTS}")
    return datagen.make_spec(tasks, joint, cfg.input_dim, cfg.noise_sigma, cfg.geometry_seed)


def build_data(cfg: DataConfig, seed: int) -> DataBundle:
    """Training, balanced test and secondary datasets for one seed."""
    spec = build_spec(cfg)
    train = datagen.sample_dataset(spec, cfg.n_train, "train", seed=seed * 1000 + 1)
    test = datagen.balanced_test(spec, cfg.n_test, seed=seed * 1000 + 2)
    if cfg.secondary_source == "independent":
        secondary = datagen.sample_dataset(
            spec, cfg.n_secondary, joint=datagen.independent_joint(spec.shape), seed=seed * 1000 + 3
        )
    elif cfg.secondary_source == "train":
        secondary = train
    else:
        raise ConfigurationError(f"secondary_source must be 'independent' or 'train', got {cfg.secondary_source!r}")
    return DataBundle(spec, train, test, secondary)


def secondary_map(data: DataBundle, tasks: list[str] | None = None) -> dict[str, LabeledDataset]:
    tasks = data.secondary.task_names if tasks is None else tasks
    return {t: data.secondary for t in tasks}
