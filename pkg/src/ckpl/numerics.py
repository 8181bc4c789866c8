"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op works on the trailing axis (or last two axes for matmul) and accepts
arbitrary leading batch dimensions, so a whole mini-batch goes through one op.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12

_seq = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad: np.ndarray | None = None) -> ComputationTape:
        return backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _rsum(a: np.ndarray) -> np.ndarray:
    # ufunc reduce directly: the ndarray.sum wrapper dominates on tiny arrays
    return np.add.reduce(a, axis=-1, keepdims=True)


def _rmax(a: np.ndarray) -> np.ndarray:
    return np.maximum.reduce(a, axis=-1, keepdims=True)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


@dataclass
class ComputationTape:
    """Nodes reachable from a loss, in execution order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> ComputationTape:
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._seq))


def backward(out: Tensor, grad: np.ndarray | None = None) -> ComputationTape:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not out.requires_grad:
        return ComputationTape()
    if grad is None:
        if out.size != 1:
            raise DimensionError(f"backward() needs an explicit seed for shape {out.shape}")
        grad = np.ones_like(out.values)
    tape = ComputationTape.from_output(out)
    grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.values
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xv = x.values
    x2 = xv * xv
    inner = _GELU_C * xv * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * xv * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th**2) * dinner),)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != (b.shape[-2] if b.ndim > 1 else b.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x of shape (..., n), w (n, m), b (m,)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    xv, wv = x.values, w.values

    def bw(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(xv @ wv + b.values, (x, w, b), bw)


def attention_core(qkv: Tensor, num_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on packed ``(..., T, 3d)`` projections."""
    qv = qkv.values
    *lead, t, d3 = qv.shape
    d = d3 // 3
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)
    nl = len(lead)
    lx = tuple(range(nl))
    # (..., T, 3, H, dh) -> (3, ..., H, T, dh)
    fwd_perm = (nl + 1, *lx, nl + 2, nl, nl + 3)
    heads = qv.reshape(*lead, t, 3, num_heads, dh).transpose(fwd_perm)
    q, k, v = heads[0], heads[1], heads[2]
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    scores -= _rmax(scores)
    att = np.exp(scores)
    att /= _rsum(att)
    ctx = att @ v
    # (..., H, T, dh) <-> (..., T, H, dh)
    swap_ht = (*lx, nl + 1, nl, nl + 2)
    out = ctx.transpose(swap_ht).reshape(*lead, t, d)

    def bw(g):
        gctx = g.reshape(*lead, t, num_heads, dh).transpose(swap_ht)
        gv = np.swapaxes(att, -1, -2) @ gctx
        gatt = gctx @ np.swapaxes(v, -1, -2)
        gs = att * (gatt - _rsum(gatt * att)) * scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        packed = np.stack([gq, gk, gv])
        return (packed.transpose(np.argsort(fwd_perm)).reshape(qv.shape),)

    return _make(out, (qkv,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.values.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.values.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.values[index], (x,), bw)


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick ``x[..., idx[...]]`` along the last axis (one index per row)."""
    shape = x.shape
    idx = np.broadcast_to(np.asarray(idx, dtype=np.int64), shape[:-1])
    c = shape[-1]
    flat = idx.reshape(-1) + c * np.arange(idx.size)

    def bw(g):
        full = np.zeros(x.size)
        full[flat] = np.reshape(g, -1)
        return (full.reshape(shape),)

    return _make(x.values.reshape(-1)[flat].reshape(idx.shape), (x,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = list(itertools.accumulate(sizes))[:-1]
    return _make(
        np.concatenate([p.values for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def splice(x: Tensor, value: Tensor, start: int) -> Tensor:
    """Copy of ``x`` with rows ``start:start+k`` of axis -2 replaced by ``value`` (broadcast)."""
    k = value.shape[-2]
    sl = (Ellipsis, slice(start, start + k), slice(None))
    vshape = value.shape
    out = x.values.copy()
    out[sl] = value.values

    def bw(g):
        gx = g.copy()
        gx[sl] = 0.0
        return gx, _unbroadcast(g[sl], vshape)

    return _make(out, (x, value), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(np.broadcast_to(x.values, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


# ------------------------------------------------------------------ composite


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def softmax_with_temperature(logits: Tensor, tau: float) -> Tensor:
    """Max-shifted softmax of ``logits / tau`` over the last axis."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if logits.ndim == 0 or logits.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    return softmax(logits * (1.0 / tau), axis=-1)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.values - _rmax(x.values)
    lse = np.log(_rsum(np.exp(shifted)))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * _rsum(g),))


def _safe_norm(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.sqrt(_rsum(v * v))
    ok = norm >= NORM_FLOOR
    return norm, ok


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-normalize along the last axis; rows with norm < 1e-12 become zero."""
    xv = x.values
    norm, ok = _safe_norm(xv)
    safe = np.where(ok, norm, 1.0)
    out = np.where(ok, xv / safe, 0.0)

    def bw(g):
        gx = (g - out * _rsum(g * out)) / safe
        return (np.where(ok, gx, 0.0),)

    return _make(out, (x,), bw)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine along the last axis (broadcasting leading axes).

    A pair where either vector has norm below 1e-12 scores 0 with zero gradient.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"cosine_similarity length mismatch: {u.shape} vs {v.shape}")
    uv, vv = u.values, v.values
    nu, oku = _safe_norm(uv)
    nv, okv = _safe_norm(vv)
    nu, nv = np.where(oku, nu, 1.0), np.where(okv, nv, 1.0)
    un, vn = uv / nu, vv / nv
    cos = _rsum(un * vn)
    ok = oku & okv
    cos = np.where(ok, cos, 0.0)

    def bw(g):
        g = np.expand_dims(g, -1) * ok
        gu = g * (vn - cos * un) / nu
        gv = g * (un - cos * vn) / nv
        return _unbroadcast(gu, uv.shape), _unbroadcast(gv, vv.shape)

    return _make(cos[..., 0], (u, v), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xv = x.values
    n = xv.shape[-1]
    xc = xv - _rsum(xv) * (1.0 / n)
    var = _rsum(xc * xc) * (1.0 / n)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.values

    def bw(g):
        gxhat = g * gv
        gx = inv / n * (n * gxhat - _rsum(gxhat)
                        - xhat * _rsum(gxhat * xhat))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(xhat * gv + beta.values, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log-likelihood per row; ``label`` is an int or an int array."""
    logits = as_tensor(logits)
    labels = np.asarray(label, dtype=np.int64)
    c = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range for {c} classes: {label}")
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    shifted = logits.values - _rmax(logits.values)
    e = np.exp(shifted)
    z = _rsum(e)
    flat = labels.reshape(-1) + c * np.arange(labels.size)
    out = (np.log(z) - shifted.reshape(-1)[flat].reshape(labels.shape + (1,)))[..., 0]
    probs = e / z

    def bw(g):
        gx = probs * np.expand_dims(g, -1)
        gx.reshape(-1)[flat] -= np.reshape(g, -1)
        return (gx,)

    return _make(out, (logits,), bw)


def dot(u: Tensor, v: Tensor) -> Tensor:
    return tsum(mul(u, v), axis=-1)


# -------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    offenders: list[tuple[str, tuple[int, ...], float, float]]
    tol: float

    @property
    def passed(self) -> bool:
        return not self.offenders


def _evaluate(f: Callable[[], Tensor]) -> np.ndarray:
    val = np.asarray(as_tensor(f()).values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(val)):
        raise EvaluationError(f"non-finite function value {val}")
    return val


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients against central differences, entry by entry.

    ``f`` takes no arguments and closes over ``params``; entries are perturbed
    in place and restored. Error per entry is |a - n| / max(1, |n|).

    ``f`` may also return a vector of independent losses. Each component then
    gets its own backward pass and its own comparison, so several problem
    instances that share parameters can be checked with one perturbation sweep.
    """
    params = list(params)
    out = f()
    _evaluate(lambda: out)
    n_out = out.size
    jac = [np.zeros((n_out, p.size)) for p in params]
    for j in range(n_out):
        for p in params:
            p.grad = None
        seed = np.zeros(out.shape)
        seed.reshape(-1)[j] = 1.0
        backward(out, seed)
        for p, rows in zip(params, jac):
            if p.grad is not None:
                rows[j] = p.grad.reshape(-1)
    worst = 0.0
    offenders = []
    checked = 0
    with no_grad():
        for k, p in enumerate(params):
            flat = p.values.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _evaluate(f)
                flat[i] = orig - h
                fm = _evaluate(f)
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                analytic = jac[k][:, i]
                err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
                worst = max(worst, float(err.max()))
                checked += n_out
                for j in np.flatnonzero(err > tol):
                    idx = tuple(int(x) for x in np.unravel_index(i, p.shape))
                    name = p.name or f"param{k}"
                    if n_out > 1:
                        name = f"{name}@{j}"
                    offenders.append((name, idx, float(analytic[j]), float(numeric[j])))
    return GradCheckReport(worst, checked, offenders, tol)
