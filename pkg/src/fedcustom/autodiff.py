"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records its output with a monotonically increasing
sequence id.  ``Tensor.backward`` collects the nodes reachable from the output
and replays their local backward rules in descending id order, which is the
exact reverse of the order in which they were recorded.

Broadcasting is deliberately narrow: elementwise ops require equal shapes,
except that ``add`` accepts a 1-D right operand matching the last axis (bias
add).  ``expand`` is the one explicit way to repeat a tensor along new leading
axes.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError

_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"
        self.name = name

    # construction helpers
    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.op = op
        out._id = next(_ids)
        needs = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out.grad = None
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise InputError("backward called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise InputError("implicit backward needs a scalar output")
            grad = np.ones_like(self.data)
        ComputeGraph.from_output(self).run_backward(np.asarray(grad, dtype=np.float64))

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise InputError("division is only defined by a scalar constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ComputeGraph:
    """Recorded nodes reachable from one output, in forward order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        seen = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def backward_order(self) -> list[Tensor]:
        return self.nodes[::-1]

    def run_backward(self, seed_grad: np.ndarray) -> None:
        out = self.nodes[-1]
        grads = {out._id: seed_grad}
        for node in self.backward_order():
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into the persistent buffer
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in grads:
                    grads[p._id] = grads[p._id] + pg
                else:
                    grads[p._id] = pg


# elementwise

def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def back(g):
            return g, g
        return Tensor._result(a.data + b.data, (a, b), back, "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def back(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return Tensor._result(a.data + b.data, (a, b), back, "bias_add")
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def back(g):
        return g, -g
    return Tensor._result(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def back(g):
        return g * b.data, g * a.data
    return Tensor._result(a.data * b.data, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        return (g * c,)
    return Tensor._result(a.data * c, (a,), back, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)
    return Tensor._result(x.data * mask, (x,), back, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    z = x.data
    z2 = z * z
    t = np.tanh(_GELU_C * z * (1.0 + 0.044715 * z2))
    out = 0.5 * z * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z2)
        d = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner
        return (g * d,)
    return Tensor._result(out, (x,), back, "gelu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def back(g):
        return (g * (1.0 - t * t),)
    return Tensor._result(t, (x,), back, "tanh")


# reductions

def tsum(x: Tensor) -> Tensor:
    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)
    return Tensor._result(np.asarray(x.data.sum()), (x,), back, "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        return (np.full(x.shape, float(g) / n),)
    return Tensor._result(np.asarray(x.data.mean()), (x,), back, "mean")


# shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)
    return Tensor._result(out, (x,), back, "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)
    return Tensor._result(np.transpose(x.data, axes), (x,), back, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return Tensor._result(out.copy(), (x,), back, "getitem")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: incompatible shapes {[tt.shape for tt in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax),
                          tuple(tensors), back, "concat")


def expand(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``x`` along new leading axes of extents ``lead``."""
    lead = tuple(lead)
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    k = len(lead)

    def back(g):
        return (g.sum(axis=tuple(range(k))),)
    return Tensor._result(out, (x,), back, "expand")


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InputError(f"embedding index out of range [0, {table.shape[0]})")

    def back(g):
        # one-hot product is much faster than np.add.at for small vocabularies
        flat = idx.reshape(-1)
        onehot = np.zeros((table.shape[0], flat.size))
        onehot[flat, np.arange(flat.size)] = 1.0
        return (onehot @ g.reshape(-1, table.shape[1]),)
    return Tensor._result(table.data[idx], (table,), back, "embedding")


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s leading axes) or has exactly
    the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for {a.shape} and {b.shape}")
    out = a.data @ b.data

    if b.ndim == 2:
        def back(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb
    return Tensor._result(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# normalisation and losses

def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` (broadcastable constant) is true."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)

    def back(g):
        return (np.where(mask, 0.0, g),)
    return Tensor._result(out, (x,), back, "masked_fill")


def softmax_rows(x: Tensor) -> Tensor:
    _check_finite("softmax_rows", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)
    return Tensor._result(s, (x,), back, "softmax")


def log_softmax_rows(x: Tensor) -> Tensor:
    _check_finite("log_softmax_rows", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=-1, keepdims=True),)
    return Tensor._result(out, (x,), back, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} vs feature {d}")
    if eps <= 0:
        raise InputError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = gy = gb = None
        if gain.requires_grad:
            gy = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gy, gb
    return Tensor._result(out, (x, gain, bias), back, "layer_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over the non-ignored rows of ``logits``."""
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} rows vs {t.shape[0]} targets")
    keep = t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise InputError("cross_entropy: every position is ignored, mean undefined")
    tk = t[keep]
    if tk.min() < 0 or tk.max() >= V:
        raise InputError(f"cross_entropy: target outside [0, {V})")
    _check_finite("cross_entropy", flat)
    rows = np.nonzero(keep)[0]
    z = flat[rows]
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    loss = (lse - z[np.arange(n), tk]).sum() / n

    def back(g):
        p = np.exp(z - (lse[:, None]))
        p[np.arange(n), tk] -= 1.0
        full = np.zeros_like(flat)
        full[rows] = p * (float(g) / n)
        return (full.reshape(logits.shape),)
    return Tensor._result(np.asarray(loss), (logits,), back, "cross_entropy")


# verification

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-3,
               max_coords: int = 64, seed: int = 0, stencil: int = 5) -> float:
    """Max relative error between analytic and finite-difference gradients.

    ``stencil=5`` uses the fourth-order five-point difference
    (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, whose truncation error is
    small enough to afford a larger ``h`` and so less roundoff; ``stencil=3``
    is the plain central difference.  At most ``max_coords`` coordinates per
    tensor are checked, sampled with ``seed``.  Relative error is
    |a - n| / (|a| + |n| + 1e-12).
    """
    if not 1e-7 <= h <= 1e-3:
        raise InputError(f"grad_check: h={h} outside [1e-7, 1e-3]")
    if stencil not in (3, 5):
        raise InputError("grad_check: stencil must be 3 or 5")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    _check_finite("grad_check", out.data)
    out.backward()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    steps = (1, -1) if stencil == 3 else (2, 1, -1, -2)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(n, max_coords), replace=False)
        gflat = ga.reshape(-1)
        for c in coords:
            orig = flat[c]
            vals = []
            with no_grad():
                for k in steps:
                    flat[c] = orig + k * h
                    vals.append(f().item())
            flat[c] = orig
            if not all(math.isfinite(v) for v in vals):
                raise NumericError("grad_check: non-finite value at a perturbed point")
            # differences first, so an untouched coordinate gives exactly 0
            if stencil == 3:
                num = (vals[0] - vals[1]) / (2 * h)
            else:
                num = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * h)
            err = abs(gflat[c] - num) / (abs(gflat[c]) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
