"""Dense arrays with tape-based reverse-mode differentiation.

Arrays are float64 numpy buffers. Operations only record onto a tape while one
is active (``with Tape() as tape: ...``); outside a tape everything runs as
plain forward computation, which is what rollouts and evaluation use.

A tape is meant to live for one truncated-BPTT chunk: build it, call
``tape.backward(loss)`` once, then drop it. Gradients accumulate into the
``.grad`` of leaf tensors (``requires_grad=True`` and not produced on a tape).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class TapeError(RuntimeError):
    pass


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


# Matmul FLOP instrumentation (2 FLOPs per multiply-add).
_flop_counter: list[int] | None = None


class count_matmul_flops:
    """Context manager that tallies FLOPs of every matmul executed inside it."""

    def __enter__(self):
        global _flop_counter
        self._prev = _flop_counter
        self.counts = [0]
        _flop_counter = self.counts
        return self

    def __exit__(self, *exc):
        global _flop_counter
        _flop_counter = self._prev

    @property
    def total(self) -> int:
        return self.counts[0]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications; parents always precede children."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()

    def __len__(self):
        return len(self.nodes)

    @property
    def nbytes(self) -> int:
        return sum(out.data.nbytes for out, _, _ in self.nodes)

    def reset(self):
        self.nodes.clear()
        self.consumed = False

    def _push(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        if self.consumed:
            raise TapeError("tape already consumed by backward(); reset() it first")
        out._tape = self
        self.nodes.append((out, parents, backward))

    def backward(self, loss: Tensor):
        if self.consumed:
            raise TapeError("backward() already called on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss is not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = backward(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
        # drop the graph now; node outputs point back at the tape, so waiting for
        # the cycle collector would keep every activation alive much longer
        self.nodes = []
        self.consumed = True


def backward(loss: Tensor):
    """Backpropagate ``loss`` through the tape that recorded it."""
    if loss._tape is None:
        raise TapeError("loss is detached (not produced on any tape)")
    loss._tape.backward(loss)


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(out_data)
    for p in parents:
        if p.requires_grad and p._tape is not None and p._tape is not tape:
            raise TapeError("input was produced on a different tape; detach() it first")
    out = Tensor(out_data, requires_grad=True)
    tape._push(out, tuple(parents), backward)
    return out


def primitive(forward: Callable, backward: Callable):
    """Build a differentiable op from a numpy ``forward`` and a ``backward``.

    ``forward(*arrays) -> (out, ctx)``; ``backward(ctx, g) -> tuple of grads``.
    Used for custom kernels (rotary embedding) and for negative controls.
    """

    def op(*inputs):
        ts = [as_tensor(t) for t in inputs]
        out, ctx = forward(*[t.data for t in ts])
        return _make(out, ts, lambda g: backward(ctx, g))

    return op


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise ---------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), bwd)


# ---- linear algebra ------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    if _flop_counter is not None:
        _flop_counter[0] += 2 * out.size * a.shape[-1]

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return _make(out, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---- shape ops -----------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bwd)


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bwd)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def gather(a, indices, axis: int = 0) -> Tensor:
    """``np.take`` along ``axis``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = np.take(a.data, indices, axis=axis)

    def bwd(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _make(out, (a,), bwd)


# ---- reductions ----------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---- fused normalization and attention -----------------------------------------------

LN_EPS = 1e-6


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply optional affine ``gain``/``bias``."""
    x = as_tensor(x)
    mu = x.data.mean(-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bwd(g):
        d = x.shape[-1]
        gx = rstd / d * (d * g - g.sum(-1, keepdims=True)
                         - xhat * (g * xhat).sum(-1, keepdims=True))
        return (gx,)

    y = _make(xhat, (x,), bwd)
    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), bwd)


def softmax_sdpa(q, k, v, scale_: float | None = None) -> Tensor:
    """softmax(q kᵀ · scale) v over the last two axes; scale defaults to 1/sqrt(head_dim)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"q/k head dim mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"k/v length mismatch: {k.shape} vs {v.shape}")
    if scale_ is None:
        scale_ = 1.0 / math.sqrt(q.shape[-1])
    logits = scale(matmul(q, swapaxes(k, -1, -2)), scale_)
    return matmul(softmax(logits, -1), v)


# ---- finite-difference checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def grad_check(f: Callable[..., Tensor], inputs, h: float = 1e-5, tol: float = 1e-4,
               max_elements: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per element is |a - b| / max(|a|, |b|, floor * g_scale), where
    g_scale is the largest analytic gradient magnitude over the whole input (not just
    the probed entries) or the largest numeric one, whichever is bigger. The floor keeps
    elements whose true gradient is ~0 from turning roundoff into huge ratios.
    ``max_elements`` subsamples entries of each input (without replacement).
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    if loss.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = rng or np.random.default_rng(0)
    per_input = []
    n_checked = 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        gn = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            gn[n] = (fp - fm) / (2 * h)
        a = ga.reshape(-1)[idx]
        g_scale = max(np.abs(ga).max(initial=0.0), np.abs(gn).max(initial=0.0))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(gn)), max(floor * g_scale, 1e-300))
        err = np.abs(a - gn) / denom
        per_input.append(float(err.max(initial=0.0)))
        n_checked += len(idx)

    for t, (rg, g) in zip(inputs, saved):
        t.requires_grad, t.grad = rg, g
    return GradCheckReport(max(per_input, default=0.0), tol, n_checked, per_input)
