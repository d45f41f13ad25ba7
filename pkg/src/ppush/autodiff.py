"""
Dense-MLP numeric kernel with tape-based reverse-mode differentiation.

Everything here works on float64 numpy arrays.  A forward pass records each
differentiable op on a `Tape`; `backward` replays the tape in reverse and
accumulates gradients into the `grad` buffers of leaf tensors (the
parameters).  The tape is single-use.

Weights are stored as (d_in, d_out) so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class DimensionError(ValueError):
    """Shapes of operands do not agree."""


class TapeStateError(RuntimeError):
    """backward called without a live tape, or on a consumed one."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Tensors produced by recorded ops carry a reference to their tape; leaf
    tensors with ``requires_grad`` receive accumulated gradients in ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self, with_grad: bool = True) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        if with_grad and self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: list[Tensor] = []
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
        if self.consumed:
            raise TapeStateError("cannot record onto a consumed tape")
        for t in inputs:
            if t.requires_grad and t._tape is None and not any(t is s for s in self.leaves):
                self.leaves.append(t)
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))
        return out


def _tape_for(inputs: Sequence[Tensor], record: bool) -> Tape | None:
    if not record or not any(t.requires_grad for t in inputs):
        return None
    tapes = {id(t._tape): t._tape for t in inputs if t._tape is not None}
    if len(tapes) > 1:
        raise TapeStateError("operands belong to different tapes")
    if tapes:
        return next(iter(tapes.values()))
    return Tape()


def matmul(x: Tensor, w: Tensor, record: bool = True) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"cannot multiply {x.shape} by {w.shape}")
    out = Tensor(x.data @ w.data)
    tape = _tape_for((x, w), record)
    if tape is None:
        return out

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        return gx, gw

    return tape.record(out, (x, w), back)


def add_bias(h: Tensor, b: Tensor, record: bool = True) -> Tensor:
    if b.data.ndim != 1 or h.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias {b.shape} does not fit activations {h.shape}")
    out = Tensor(h.data + b.data)
    tape = _tape_for((h, b), record)
    if tape is None:
        return out
    return tape.record(out, (h, b), lambda g: (g, g.sum(axis=0)))


def activate(h: Tensor, kind: str, record: bool = True) -> Tensor:
    if kind == "identity":
        return h
    if kind == "tanh":
        y = np.tanh(h.data)
        back = lambda g: (g * (1.0 - y * y),)
    elif kind == "relu":
        mask = h.data > 0
        y = np.where(mask, h.data, 0.0)
        back = lambda g: (g * mask,)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = Tensor(y)
    tape = _tape_for((h,), record)
    if tape is None:
        return out
    return tape.record(out, (h,), back)


def scale(t: Tensor, c: float, record: bool = True) -> Tensor:
    out = Tensor(c * t.data)
    tape = _tape_for((t,), record)
    if tape is None:
        return out
    return tape.record(out, (t,), lambda g: (c * g,))


def mse_loss(pred: Tensor, label) -> Tensor:
    """Mean over all elements of the squared difference."""
    label = as_tensor(label)
    if pred.shape != label.shape:
        raise DimensionError(f"prediction {pred.shape} vs label {label.shape}")
    diff = pred.data - label.data
    out = Tensor(np.mean(diff * diff))
    tape = _tape_for((pred,), True)
    if tape is None:
        return out
    n = diff.size
    return tape.record(out, (pred,), lambda g: (g * (2.0 / n) * diff,))


LOSSES: dict[str, Callable[[Tensor, Tensor], Tensor]] = {"mse": mse_loss}


def resolve_loss(loss) -> Callable[[Tensor, Tensor], Tensor]:
    if callable(loss):
        return loss
    try:
        return LOSSES[loss]
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}; known: {sorted(LOSSES)}") from None


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into every leaf's ``grad`` (accumulating)."""
    tape = loss._tape
    if tape is None:
        raise TapeStateError("backward called on a value with no recorded forward pass")
    if tape.consumed:
        raise TapeStateError("tape already consumed by a previous backward")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

    for leaf in tape.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, gt in zip(inputs, fn(g)):
            if gt is None or not t.requires_grad:
                continue
            if t._tape is None:
                t.grad += gt
            elif id(t) in pending:
                pending[id(t)] = pending[id(t)] + gt
            else:
                pending[id(t)] = gt

    tape.consumed = True
    tape.nodes.clear()


# --------------------------------------------------------------------------
# architecture and parameters


@dataclass(frozen=True)
class MlpArch:
    """Fully connected net; ``activation`` is applied after every layer but the last."""

    layer_dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims needs >= 2 positive entries, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, (d_in, d_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            out.append((f"w{i}", (d_in, d_out)))
            out.append((f"b{i}", (d_out,)))
        return out

    def numel(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def check(self, params: "ParamSet") -> None:
        expected = self.shapes()
        got = [(name, t.shape) for name, t in params.items()]
        if got != expected:
            raise DimensionError(f"parameters {got} do not match architecture {expected}")


class ParamSet:
    """Ordered (name, Tensor) pairs holding one particle's weights and biases."""

    def __init__(self, items: Sequence[tuple[str, Tensor]]):
        self._items = [(name, t) for name, t in items]
        names = [n for n, _ in self._items]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        for _, t in self._items:
            t.requires_grad = True

    @classmethod
    def init(cls, arch: MlpArch, seed: int) -> "ParamSet":
        """Uniform in +-1/sqrt(d_in) for weights and biases of each layer."""
        rng = np.random.default_rng(seed)
        items = []
        for name, shape in arch.shapes():
            bound = 1.0 / np.sqrt(arch.layer_dims[int(name[1:])])
            items.append((name, Tensor(rng.uniform(-bound, bound, size=shape))))
        return cls(items)

    @classmethod
    def zeros(cls, arch: MlpArch) -> "ParamSet":
        return cls([(name, Tensor(np.zeros(shape))) for name, shape in arch.shapes()])

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._items)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self._items]

    def names(self) -> list[str]:
        return [n for n, _ in self._items]

    def __getitem__(self, name: str) -> Tensor:
        for n, t in self._items:
            if n == name:
                return t
        raise KeyError(name)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors())

    def __len__(self) -> int:
        return len(self._items)

    def numel(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors()])

    def flatten_grad(self) -> np.ndarray:
        if not self.has_grads():
            raise ValueError("parameters carry no gradients")
        return np.concatenate([t.grad.ravel() for t in self.tensors()])

    def _split(self, vec: np.ndarray) -> list[np.ndarray]:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != self.numel():
            raise DimensionError(f"flat vector of size {vec.size} does not fit {self.numel()} parameters")
        parts, offset = [], 0
        for t in self.tensors():
            parts.append(vec[offset:offset + t.data.size].reshape(t.shape))
            offset += t.data.size
        return parts

    def unflatten(self, vec: np.ndarray) -> "ParamSet":
        """New ParamSet shaped like this one, filled from ``vec`` (no grads)."""
        return ParamSet([(n, Tensor(p.copy())) for n, p in zip(self.names(), self._split(vec))])

    def assign_flat(self, vec: np.ndarray) -> None:
        for t, p in zip(self.tensors(), self._split(vec)):
            t.data[...] = p

    def copy(self, with_grad: bool = True) -> "ParamSet":
        return ParamSet([(n, t.copy(with_grad)) for n, t in self._items])

    def has_grads(self) -> bool:
        return all(t.grad is not None for t in self.tensors())

    def zero_grad(self) -> None:
        for t in self.tensors():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad.fill(0.0)

    def __repr__(self) -> str:
        return "ParamSet(" + ", ".join(f"{n}{t.shape}" for n, t in self._items) + ")"


def forward(arch: MlpArch, params: ParamSet, x, record: bool = True) -> Tensor:
    """Evaluate the net on a (batch, d_in) input, recording a tape when asked."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != arch.layer_dims[0]:
        raise DimensionError(f"input {x.shape} does not fit input width {arch.layer_dims[0]}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("input contains non-finite values")
    arch.check(params)
    ts = params.tensors()
    h = x
    for i in range(arch.n_layers):
        h = add_bias(matmul(h, ts[2 * i], record), ts[2 * i + 1], record)
        if i < arch.n_layers - 1:
            h = activate(h, arch.activation, record)
    return h


def loss_and_grad(arch: MlpArch, params: ParamSet, x, y, loss="mse") -> float:
    """Zero grads, compute loss, backprop; returns the loss value."""
    pred = forward(arch, params, x)
    params.zero_grad()
    loss_t = resolve_loss(loss)(pred, y)
    backward(loss_t)
    return loss_t.item()


# --------------------------------------------------------------------------
# optimizer


def sgd_step(params: ParamSet, lr: float, grads: Sequence[np.ndarray] | None = None) -> ParamSet:
    """In-place ``theta -= lr * grad``; uses the params' own grad buffers by default."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if grads is None:
        if not params.has_grads():
            raise ValueError("sgd_step needs populated gradients")
        grads = [t.grad for t in params.tensors()]
    if len(grads) != len(params):
        raise DimensionError("gradient list does not match parameters")
    for t, g in zip(params.tensors(), grads):
        t.data -= lr * g
    return params


@dataclass
class SGD:
    lr: float

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")

    def step(self, params: ParamSet) -> None:
        sgd_step(params, self.lr)


# --------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "uniform"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian prior needs sigma > 0")

    @classmethod
    def uniform(cls) -> "PriorSpec":
        return cls("uniform")

    @classmethod
    def gaussian(cls, sigma: float) -> "PriorSpec":
        return cls("gaussian", sigma)


def prior_logdensity_grad(prior: PriorSpec, params: ParamSet) -> list[np.ndarray]:
    """Gradient of log p(theta), one array per parameter tensor."""
    if prior.kind == "uniform":
        return [np.zeros_like(t.data) for t in params.tensors()]
    inv_var = 1.0 / (prior.sigma * prior.sigma)
    return [-inv_var * t.data for t in params.tensors()]


def prior_logdensity_grad_flat(prior: PriorSpec, theta: np.ndarray) -> np.ndarray:
    if prior.kind == "uniform":
        return np.zeros_like(theta)
    return -(1.0 / (prior.sigma * prior.sigma)) * theta


# --------------------------------------------------------------------------
# squared exponential kernel


def _check_kernel_args(a: np.ndarray, b: np.ndarray, l: float) -> None:
    if not l > 0:
        raise ValueError(f"bandwidth must be positive, got {l}")
    if a.shape != b.shape:
        raise DimensionError(f"kernel arguments differ in shape: {a.shape} vs {b.shape}")


def sq_exp_kernel(a, b, l: float) -> float:
    """k(a, b) = exp(-|a - b|^2 / (2 l^2))."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    _check_kernel_args(a, b, l)
    d = a - b
    return float(np.exp(-np.dot(d, d) / (2.0 * l * l)))


def sq_exp_kernel_grad_arg1(a, b, l: float) -> np.ndarray:
    """Gradient of k(a, b) with respect to a."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    _check_kernel_args(a, b, l)
    d = a - b
    k = np.exp(-np.dot(d, d) / (2.0 * l * l))
    return (-k / (l * l)) * d
