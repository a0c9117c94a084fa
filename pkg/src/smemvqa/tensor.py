"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the memory network needs are provided. Every op takes
``Tensor`` inputs, returns a new ``Tensor`` and records a closure that pushes
the output gradient back to its parents. ``Tensor.backward`` walks the graph
in reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class EmptyQuestionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self, grad: np.ndarray | None = None):
        """Backpropagate from this node. Seeds with ones for scalar outputs."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # intermediate buffers live only for this pass
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot combine shapes {a.shape} and {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot combine shapes {a.shape} and {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    gate = x.data > 0  # subgradient at 0 is 0
    # maximum keeps NaN, so a diverged hidden state still poisons the loss
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * gate,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading shapes differ, {a.shape} vs {b.shape}")
    k = a.shape[-1]
    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), lambda g: (g[..., :k], g[..., k:]))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]

    def back(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _make(x.data.mean(axis=axis), (x,), back)


def total(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# --------------------------------------------------------------- products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Backward gives dA = dC.B^T and dB = A^T.dC, summed over broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2 and a.data.ndim > 2:
            # fold batch into rows so the weight gradient is one product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back)


def inner(a: Tensor, b: Tensor) -> Tensor:
    """out[..., i, j] = sum_n a[..., i, n] * b[..., j, n].

    Each entry is reduced along the contiguous last axis on its own, so its
    value does not depend on how many rows sit beside it. Padding rows can be
    appended to ``a`` without disturbing any real entry.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1] or a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"inner: incompatible shapes {a.shape} and {b.shape}")
    try:
        prod = a.data[..., :, None, :] * b.data[..., None, :, :]
    except ValueError:
        raise DimensionError(f"inner: incompatible shapes {a.shape} and {b.shape}") from None
    out = np.ascontiguousarray(prod).sum(axis=-1)

    def back(g):
        ga = np.matmul(g, b.data)
        gb = np.matmul(np.swapaxes(g, -1, -2), a.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back)


def weighted_sum_seq(weights: Tensor, x: Tensor) -> Tensor:
    """sum_j weights[j] * x[..., j, :], accumulated strictly left to right.

    ``weights`` may be longer than the sequence axis of ``x``; trailing weights
    are unused.
    """
    weights, x = as_tensor(weights), as_tensor(x)
    t = x.shape[-2]
    if weights.data.ndim != 1 or weights.shape[0] < t:
        raise DimensionError(f"weighted_sum_seq: weights {weights.shape} vs sequence {x.shape}")
    w = weights.data
    acc = w[0] * x.data[..., 0, :]
    for j in range(1, t):
        acc = acc + w[j] * x.data[..., j, :]

    def back(g):
        gw = np.zeros_like(w)
        gw[:t] = (g[..., None, :] * x.data).reshape(-1, t, x.shape[-1]).sum(axis=(0, 2))
        gx = w[:t, None] * g[..., None, :]
        return gw, gx

    return _make(acc, (weights, x), back)


# ---------------------------------------------------------------- reductions

def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"row_softmax: empty row in shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def masked_rowwise_max(c: Tensor, mask) -> tuple[Tensor, np.ndarray]:
    """Max over the row axis (-2) restricted to rows where ``mask`` is true.

    Returns the values and the winning row per column; ties go to the lowest
    row index. The gradient of each column flows to its winning row only.
    """
    c = as_tensor(c)
    mask = np.asarray(mask, dtype=bool)
    if c.data.ndim < 2 or mask.shape != c.shape[:-1]:
        raise DimensionError(f"masked_rowwise_max: mask {mask.shape} does not fit {c.shape}")
    if not mask.any(axis=-1).all():
        raise EmptyQuestionError("empty question: every row is masked")
    masked = np.where(mask[..., None], c.data, -np.inf)
    arg = masked.argmax(axis=-2)
    values = np.take_along_axis(c.data, arg[..., None, :], axis=-2)[..., 0, :]

    def back(g):
        gc = np.zeros_like(c.data)
        np.put_along_axis(gc, arg[..., None, :], g[..., None, :], axis=-2)
        return (gc,)

    return _make(values, (c,), back), arg


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"answer class out of range [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.array(loss), (logits,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of ``table``; negative ids give frozen zero vectors."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    real = ids >= 0
    if ids.size and ids.max(initial=-1) >= table.shape[0]:
        raise DimensionError(f"embedding id {ids.max()} out of range for table {table.shape}")
    out = np.where(real[..., None], table.data[np.where(real, ids, 0)], 0.0)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids[real], g[real])
        return (gt,)

    return _make(out, (table,), back)


# ---------------------------------------------------------------- optimiser

@dataclass
class OptState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


def sgd_momentum_step(param: Tensor, state: OptState, frozen_rows: Iterable[int] = ()):
    """Classical momentum: v <- mu*v - lr*(g + wd*theta); theta <- theta + v.

    Rows listed in ``frozen_rows`` are neither decayed nor moved.
    """
    if param.grad is None:
        raise RuntimeError(f"{param!r} has no gradient slot")
    v = state.velocity.get(id(param))
    if v is None:
        v = state.velocity[id(param)] = np.zeros_like(param.data)
    g = param.grad
    if state.weight_decay:
        g = g + state.weight_decay * param.data
    v *= state.momentum
    v -= state.lr * g
    for r in frozen_rows:
        v[r] = 0.0
    param.data += v
    param.grad[...] = 0.0


# ---------------------------------------------------------------- checking

def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    skip: Callable[[Tensor, tuple], bool] | None = None,
    floor: float = 1e-8,
) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar tensor. Returns the largest relative error, with the
    denominator max(|analytic|, |numeric|, floor). ``max_coords`` samples that
    many coordinates per parameter instead of visiting all of them.

    Central differences carry roughly eps*|loss|/h of roundoff (~1e-11 at
    h=1e-5), so gradients much smaller than ``floor`` are compared mostly
    against noise; raise ``floor`` when a model has near-dead coordinates.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        coords = list(np.ndindex(p.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            if skip is not None and skip(p, idx):
                continue
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = float(loss_fn().data)
            p.data[idx] = orig - h
            fm = float(loss_fn().data)
            p.data[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"loss is not finite near {p.name}{idx}")
            num = (fp - fm) / (2 * h)
            ana = float(a[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------- randomness

class Rng:
    """Seeded uniform source backed by numpy's PCG64 (permuted congruential).

    PCG64 output is specified bit-for-bit, so a seed reproduces the same
    stream on every platform.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def next(self) -> float:
        return float(self.gen.random())

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, stable for a given (seed, key)."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, key])))
        return child


def rng_next(r: Rng) -> float:
    return r.next()
