"""Feature extractor, task heads and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import DimensionError, Tensor, add_bias, constant, matmul, parameter, relu

CHECKPOINT_MAGIC = b"JLUCKPT\x00"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"  # "relu" | "none"
    frozen: bool = False


@dataclass
class TaskSpec:
    name: str
    n_classes: int


@dataclass
class Architecture:
    """Layer sizes of the shared extractor plus the task heads."""

    input_dim: int
    primary: TaskSpec
    hidden: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    secondary: list[TaskSpec] = field(default_factory=list)
    frozen_layers: tuple[int, ...] = ()

    def layer_specs(self) -> list[LayerSpec]:
        dims = [self.input_dim, *self.hidden, self.embedding_dim]
        specs = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            specs.append(LayerSpec(dims[i], dims[i + 1], "none" if last else "relu", i in self.frozen_layers))
        return specs

    def validate(self) -> None:
        dims = [self.input_dim, *self.hidden, self.embedding_dim]
        if any(int(d) != d or d <= 0 for d in dims):
            raise ConfigurationError(f"layer dimensions must be positive integers, got {dims}")
        n_layers = len(dims) - 1
        bad = [i for i in self.frozen_layers if not 0 <= i < n_layers]
        if bad:
            raise ConfigurationError(f"frozen layer indices {bad} out of range for {n_layers} layers")
        for task in [self.primary, *self.secondary]:
            if task.n_classes < 2:
                raise ConfigurationError(f"task {task.name!r} needs at least 2 classes")
        names = [t.name for t in [self.primary, *self.secondary]]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate task names in {names}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["frozen_layers"] = list(self.frozen_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            input_dim=int(d["input_dim"]),
            primary=TaskSpec(**d["primary"]),
            hidden=tuple(int(h) for h in d.get("hidden", (64,))),
            embedding_dim=int(d.get("embedding_dim", 32)),
            secondary=[TaskSpec(**t) for t in d.get("secondary", [])],
            frozen_layers=tuple(int(i) for i in d.get("frozen_layers", ())),
        )


@dataclass(eq=False)
class Linear:
    spec: LayerSpec
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        out = add_bias(matmul(x, self.weight), self.bias)
        return relu(out) if self.spec.activation == "relu" else out

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass(eq=False)
class FeatureExtractor:
    layers: list[Linear]

    @property
    def input_dim(self) -> int:
        return self.layers[0].spec.in_dim

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].spec.out_dim


@dataclass(eq=False)
class Head:
    task_name: str
    weight: Tensor
    bias: Tensor

    @property
    def n_classes(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass(eq=False)
class NetworkBundle:
    arch: Architecture
    extractor: FeatureExtractor
    primary_head: Head
    secondary_heads: list[Head]

    def all_params(self) -> list[Tensor]:
        out = [p for layer in self.extractor.layers for p in layer.params()]
        out += self.primary_head.params()
        for head in self.secondary_heads:
            out += head.params()
        return out

    def secondary_head(self, task: str) -> Head:
        for head in self.secondary_heads:
            if head.task_name == task:
                return head
        raise KeyError(task)


def _uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _head(rng: np.random.Generator, task: TaskSpec, dim: int) -> Head:
    return Head(
        task.name,
        parameter(_uniform(rng, dim, task.n_classes), name=f"{task.name}.weight"),
        parameter(np.zeros((1, task.n_classes)), name=f"{task.name}.bias"),
    )


def init_bundle(arch: Architecture, seed: int) -> NetworkBundle:
    """Scaled-uniform weights in +-1/sqrt(fan_in), zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    layers = []
    for i, spec in enumerate(arch.layer_specs()):
        w = parameter(_uniform(rng, spec.in_dim, spec.out_dim), name=f"layer{i}.weight", frozen=spec.frozen)
        b = parameter(np.zeros((1, spec.out_dim)), name=f"layer{i}.bias", frozen=spec.frozen)
        layers.append(Linear(spec, w, b))
    primary = _head(rng, arch.primary, arch.embedding_dim)
    secondary = [_head(rng, t, arch.embedding_dim) for t in arch.secondary]
    return NetworkBundle(arch, FeatureExtractor(layers), primary, secondary)


def forward_features(bundle: NetworkBundle, x) -> Tensor:
    h = x if isinstance(x, Tensor) else constant(x)
    if h.shape[1] != bundle.extractor.input_dim:
        raise DimensionError(f"input has {h.shape[1]} columns, extractor expects {bundle.extractor.input_dim}")
    for layer in bundle.extractor.layers:
        h = layer(h)
    return h


def forward_head(head: Head, embedding: Tensor) -> Tensor:
    if embedding.shape[1] != head.weight.shape[0]:
        raise DimensionError(
            f"embedding of shape {embedding.shape} does not fit head {head.task_name!r} of shape {head.weight.shape}"
        )
    return add_bias(matmul(embedding, head.weight), head.bias)


def params_of(bundle: NetworkBundle, selector: str) -> list[Tensor]:
    """Parameters of one block.

    ``selector`` is ``"repr"``, ``"primary"``, ``"all_secondary"`` or
    ``"secondary:<m>"`` where ``m`` is a head index or task name.
    Frozen extractor layers are never returned.
    """
    if selector == "repr":
        return [p for layer in bundle.extractor.layers if not layer.spec.frozen for p in layer.params()]
    if selector == "primary":
        return bundle.primary_head.params()
    if selector == "all_secondary":
        return [p for head in bundle.secondary_heads for p in head.params()]
    if selector.startswith("secondary:"):
        key = selector.split(":", 1)[1]
        if key.isdigit() and int(key) < len(bundle.secondary_heads):
            return bundle.secondary_heads[int(key)].params()
        try:
            return bundle.secondary_head(key).params()
        except KeyError:
            pass
    raise ConfigurationError(f"unknown parameter selector {selector!r}")


def checksum(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.values).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic (8 bytes) | version u32 | header length u32 | header JSON (utf-8)
#   then per parameter, in all_params() order: rows u64 | cols u64 | float64 LE data
# ---------------------------------------------------------------------------


def save_bundle(bundle: NetworkBundle, path) -> None:
    header = json.dumps({"arch": bundle.arch.to_dict()}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    for p in bundle.all_params():
        rows, cols = p.shape
        chunks.append(struct.pack("<QQ", rows, cols))
        chunks.append(p.values.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_bundle(path) -> NetworkBundle:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    offset = 16 + hlen
    if len(data) < offset:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        arch = Architecture.from_dict(json.loads(data[16:offset])["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc
    bundle = init_bundle(arch, seed=0)
    for p in bundle.all_params():
        if len(data) < offset + 16:
            raise CheckpointFormatError(f"{path}: truncated at parameter {p.name}")
        rows, cols = struct.unpack_from("<QQ", data, offset)
        offset += 16
        if (rows, cols) != p.shape:
            raise CheckpointFormatError(f"{path}: parameter {p.name} has shape {(rows, cols)}, expected {p.shape}")
        nbytes = rows * cols * 8
        if len(data) < offset + nbytes:
            raise CheckpointFormatError(f"{path}: truncated at parameter {p.name}")
        p.values = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - offset} trailing bytes")
    return bundle
