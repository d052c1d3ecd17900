"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every node is a :class:`Tensor` holding a ``(rows, cols)`` matrix. Operations
record their inputs and a local backward rule; :func:`backward` replays them
in reverse topological order. Gradients accumulate until :func:`zero_grads`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


def _as_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class OpRecord:
    name: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """A matrix node in a differentiable computation graph."""

    __slots__ = ("values", "grad", "requires_grad", "frozen", "op", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "", frozen: bool = False):
        self.values = _as_matrix(values)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.frozen = frozen
        self.op: OpRecord | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the loss code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(values: np.ndarray, name: str, inputs: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        out.op = OpRecord(name, inputs, rule)
    return out


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values, name: str = "", frozen: bool = False) -> Tensor:
    return Tensor(values, requires_grad=not frozen, name=name, frozen=frozen)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def rule(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), rule)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if b.shape[0] != 1 or b.shape[1] != x.shape[1]:
        raise DimensionError(f"bias of shape {b.shape} does not fit input of shape {x.shape}")

    def rule(g):
        return g, g.sum(axis=0, keepdims=True)

    return _make(x.values + b.values, "add_bias", (x, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.values * c, "scale", (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array([[x.values.sum()]]), "sum", (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.values.size)


def log_softmax_rows(logits: Tensor) -> Tensor:
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, "log_softmax", (logits,), rule)


def softmax_rows(logits: Tensor) -> Tensor:
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "softmax", (logits,), rule)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Op-producing nodes in execution (topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.op is not None:
                for parent in node.op.inputs:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        return cls([n for n in order if n.op is not None])

    def __len__(self) -> int:
        return len(self.nodes)


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(output)/d(leaf) into every leaf that requires grad."""
    if output.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) output, got {output.shape}")
    if tape is None:
        tape = Tape.from_output(output)
    if output.op is None:
        if output.requires_grad:
            output.grad += 1.0
        return
    # intermediate gradients live here, not in node.grad, so leaves alone accumulate
    upstream: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.op.inputs, node.op.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.op is None:
                parent.grad += pg
            elif id(parent) in upstream:
                upstream[id(parent)] = upstream[id(parent)] + pg
            else:
                upstream[id(parent)] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad.fill(0.0)


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for p in params:
        if p.frozen:
            continue
        p.values -= lr * p.grad


def finite_diff_grad(f: Callable[[np.ndarray], float], p: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``p``."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    p = np.array(p, dtype=np.float64)
    grad = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + step
        hi = f(p.copy())
        p[idx] = orig - step
        lo = f(p.copy())
        p[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
    return grad
