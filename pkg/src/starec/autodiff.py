"""Small reverse-mode differentiation engine over dense float64 arrays.

Only the operations the recommender needs are provided. Every operation
that touches a tensor requiring gradients is appended to the active
:class:`Tape`; :func:`backward_gradients` walks the tape in reverse and
accumulates gradients into :class:`Parameter` objects.

Inputs may broadcast against each other in the elementwise ops (bias
vectors, masks); the backward pass sums the gradient back to the input
shape.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_ACTIVE_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when a backward pass produces a gradient of the wrong shape."""


class Tensor:
    __slots__ = ("value", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


class Parameter(Tensor):
    """A named leaf tensor with a persistent gradient slot."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = model(...)
        backward_gradients(tape, loss)
    """

    def __init__(self):
        self.records: list[tuple[str, Tensor | tuple, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def _record(op: str, out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].records.append((op, out, inputs, backward))
    return out


def _record_many(op: str, outs: tuple, inputs: tuple, backward: Callable) -> tuple:
    """Record one operation with several outputs; ``backward`` receives
    one gradient per output (zeros for outputs that received none)."""
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        for out in outs:
            out.requires_grad = True
        _ACTIVE_TAPES[-1].records.append((op, outs, inputs, backward))
    return outs


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value)
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value - b.value)
    sa, sb = a.shape, b.shape
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = Tensor(av * bv)
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.value)
    return _record("sigmoid", Tensor(y), (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _record("tanh", Tensor(y), (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    on = x.value > 0
    return _record("relu", Tensor(np.where(on, x.value, 0.0)), (x,), lambda g: (g * on,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", Tensor(x.value * keep), (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is a 2-d matrix (``a`` may carry leading batch axes)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    out = Tensor(av @ bv)

    def backward(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", out, (a, b), backward)


def batched_dot(x: Tensor, q: Tensor) -> Tensor:
    """Dot product of every row of ``x`` (N, L, D) with ``q`` (N, D) -> (N, L)."""
    xv, qv = x.value, q.value
    out = Tensor(np.einsum("nld,nd->nl", xv, qv))

    def backward(g):
        return g[:, :, None] * qv[:, None, :], np.einsum("nl,nld->nd", g, xv)

    return _record("batched_dot", out, (x, q), backward)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = Tensor(x.value.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (x,), backward)


def softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is false get weight 0.

    A slice whose positions are all masked yields all zeros.
    """
    v = x.value
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    top = np.max(v, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(v - top)
    total = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, total, out=np.zeros_like(e), where=total > 0)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", Tensor(y), (x,), backward)


def cosine(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis; defined as 0 when either norm is 0."""
    av, bv = a.value, b.value
    na = np.sqrt((av * av).sum(-1))
    nb = np.sqrt((bv * bv).sum(-1))
    dot = (av * bv).sum(-1)
    ok = (na > eps) & (nb > eps)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    c = np.where(ok, dot / (na_s * nb_s), 0.0)

    def backward(g):
        g = np.where(ok, g, 0.0)[..., None]
        cc = c[..., None]
        ga = g * (bv / (na_s * nb_s)[..., None] - cc * av / (na_s * na_s)[..., None])
        gb = g * (av / (na_s * nb_s)[..., None] - cc * bv / (nb_s * nb_s)[..., None])
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("cosine", Tensor(c), (a, b), backward)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.value for x in xs], axis=axis))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", out, tuple(xs),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.stack([x.value for x in xs], axis=axis))
    n = len(xs)
    return _record("stack", out, tuple(xs),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def unstack(x: Tensor, axis: int = 1) -> tuple[Tensor, ...]:
    """Split ``x`` into its slices along ``axis``; the backward pass stacks
    the slice gradients once instead of scattering each into a full array."""
    x = as_tensor(x)
    outs = tuple(Tensor(np.take(x.value, i, axis=axis)) for i in range(x.shape[axis]))
    return _record_many("unstack", outs, (x,), lambda gs: (np.stack(gs, axis=axis),))


def index(x: Tensor, key) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[key] = g
        return (full,)

    return _record("index", Tensor(x.value[key]), (x,), backward)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[idx]`` with scatter-add in the backward pass."""
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _record("take_rows", Tensor(table.value[idx]), (table,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _record("reshape", Tensor(x.value.reshape(shape)), (x,),
                   lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

LOGIT_CLAMP = float(np.log((1.0 - 1e-12) / 1e-12))


def log_loss_from_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Summed binary log loss of ``sigmoid(z)`` against labels ``y``.

    Logits are clamped so that both ``p`` and ``1 - p`` stay >= 1e-12.
    """
    y = np.asarray(y, dtype=DTYPE).reshape(z.shape)
    zc = np.clip(z.value, -LOGIT_CLAMP, LOGIT_CLAMP)
    p = expit(zc)
    # -[y log p + (1-y) log(1-p)] written with logaddexp for stability
    value = (y * np.logaddexp(0.0, -zc) + (1.0 - y) * np.logaddexp(0.0, zc)).sum()
    inside = np.abs(z.value) <= LOGIT_CLAMP
    return _record("log_loss", Tensor(value), (z,),
                   lambda g: (g * (p - y) * inside,))


# ---------------------------------------------------------------------------
# backward pass and parameter storage
# ---------------------------------------------------------------------------


def backward_gradients(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every parameter's ``grad``."""
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for op, out, inputs, fn in reversed(tape.records):
        if isinstance(out, tuple):
            gs = [grads.pop(id(o), None) for o in out]
            if all(g is None for g in gs):
                continue
            g = [np.zeros(o.shape, dtype=DTYPE) if gi is None else gi for o, gi in zip(out, gs)]
        else:
            g = grads.pop(id(out), None)
            if g is None:
                continue
        for inp, gi in zip(inputs, fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(
                    f"{op}: gradient shape {gi.shape} does not match input {inp.shape}")
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


class ParameterStore(OrderedDict):
    """Ordered mapping ``name -> Parameter``."""

    def add(self, name: str, value) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(value, name)
        self[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.items():
            v = np.asarray(state[k], dtype=DTYPE)
            if v.shape != p.shape:
                raise ShapeError(f"{k}: shape {v.shape} != {p.shape}")
            p.value = v.copy()

    def n_values(self) -> int:
        return int(np.sum([p.value.size for p in self.values()]))


def sgd_update(params: Iterable[Parameter], lr: float, l2: float = 0.0) -> None:
    """``v <- v - lr * (grad + l2 * v)``, then zero the gradients."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.value -= lr * (p.grad + l2 * p.value)
        p.zero_grad()


class Adam:
    """Adam; the L2 term is added to the gradient as in :func:`sgd_update`."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Iterable[Parameter], lr: float, l2: float = 0.0) -> None:
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            g = p.grad + l2 * p.value
            m = self.m.setdefault(p.name, np.zeros_like(g))
            v = self.v.setdefault(p.name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.value -= lr * mhat / (np.sqrt(vhat) + self.eps)
            p.zero_grad()
