"""Dense float64 tensors with reverse-mode differentiation.

Only the operations needed by the two sequence models and the contrastive
objectives are provided. Several of them (``gru``, ``layer_norm``,
``cosine_matrix``, ``log_sigmoid``) are fused kernels with hand-written
backward passes, which keeps the Python graph small enough for per-client
training on a single core.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError

_GRAD_ENABLED = True

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the graph bookkeeping for ``backward``."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Backward | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor) and other.requires_grad:
            raise NotImplementedError("division by a tracked tensor")
        return mul(self, 1.0 / _data(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Backward, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Repeated calls add to existing leaf gradients; call ``zero_grad`` between
    independent passes.
    """
    if root.data.size != 1:
        raise InputError(f"backward needs a scalar root, got shape {root.shape}")
    if not np.isfinite(root.data).all():
        raise FloatingPointError("non-finite value at backward root")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(ad @ bd, (a, b), bw, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    """Reverse (or permute) axes; with no ``axes`` on a batch, swaps the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2) if x.ndim >= 2 else (0,)
    inverse = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def take(table: Tensor, index, padding_idx: int | None = None) -> Tensor:
    """Row lookup ``table[index]``; the padding row never receives gradient."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise InputError(f"row index out of range [0, {table.shape[0]})")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index.reshape(-1), g.reshape(-1, *shape[1:]))
        if padding_idx is not None:
            out[padding_idx] = 0.0
        return (out,)

    return _make(table.data[index], (table,), bw, "take")


def gather_last(x: Tensor, index) -> Tensor:
    """``take_along_axis`` on the last axis: out[..., c] = x[..., index[..., c]]."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        lead = int(np.prod(shape[:-1]))
        rows = np.repeat(np.arange(lead), index.shape[-1])
        np.add.at(out.reshape(lead, shape[-1]), (rows, index.reshape(-1)), g.reshape(-1))
        return (out,)

    return _make(np.take_along_axis(x.data, index, axis=-1), (x,), bw, "gather_last")


def gather_dot(h: Tensor, table: Tensor, index, padding_idx: int | None = None) -> Tensor:
    """Scores of candidate rows: out[..., c] = h[...] . table[index[..., c]].

    ``h`` is [..., d] and ``index`` is [..., C]; cheaper than scoring the
    whole table when C is small.
    """
    h, table = _as_tensor(h), _as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[:-1] != h.shape[:-1]:
        raise DimensionError(f"candidate index {index.shape} does not match states {h.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise InputError(f"row index out of range [0, {table.shape[0]})")
    rows = table.data[index]
    hd = h.data
    tshape = table.shape

    def bw(g):
        dh = np.einsum("...c,...cd->...d", g, rows)
        dt = np.zeros(tshape)
        np.add.at(dt, index.reshape(-1), (g[..., None] * hd[..., None, :]).reshape(-1, tshape[1]))
        if padding_idx is not None:
            dt[padding_idx] = 0.0
        return dh, dt

    return _make(np.einsum("...d,...cd->...c", hd, rows), (h, table), bw, "gather_dot")


# ---------------------------------------------------------------------------
# nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = _as_tensor(x)
    xd = x.data
    y = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    return _make(y, (x,), lambda g: (g * _sigmoid(-xd),), "log_sigmoid")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _masked_softmax(xd: np.ndarray, axis: int, mask) -> np.ndarray:
    if mask is None:
        z = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        filled = np.where(mask, xd, -np.inf)
        top = filled.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(np.where(mask, xd - top, 0.0)), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get probability 0."""
    x = _as_tensor(x)
    y = _masked_softmax(x.data, axis, mask)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def softmax_row(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 1 or x.shape[0] < 1:
        raise InputError("softmax_row needs a non-empty vector")
    return softmax(x, axis=0)


def logsumexp(x, axis: int = -1, mask=None) -> Tensor:
    """log(sum(exp(x))) over ``axis``, restricted to ``mask`` when given.

    Rows with nothing selected return -inf; callers must not backpropagate
    through them.
    """
    x = _as_tensor(x)
    xd = x.data
    filled = xd if mask is None else np.where(mask, xd, -np.inf)
    top = filled.max(axis=axis, keepdims=True)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(filled - safe_top).sum(axis=axis, keepdims=True)) + safe_top
    weights = _masked_softmax(xd, axis, mask)
    return _make(
        np.squeeze(out, axis=axis),
        (x,),
        lambda g: (np.expand_dims(g, axis) * weights,),
        "logsumexp",
    )


# ---------------------------------------------------------------------------
# fused kernels


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, g.shape[-1])
        return dx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


NORM_FLOOR = 1e-12


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` [n, d] and ``b`` [m, d].

    A row whose norm is below ``NORM_FLOOR`` has similarity 0 with everything
    and receives zero gradient.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix needs [n,d] and [m,d], got {a.shape}, {b.shape}")
    na = np.linalg.norm(a.data, axis=1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=1, keepdims=True)
    ia = np.where(na < NORM_FLOOR, 0.0, 1.0 / np.maximum(na, NORM_FLOOR))
    ib = np.where(nb < NORM_FLOOR, 0.0, 1.0 / np.maximum(nb, NORM_FLOOR))
    ahat, bhat = a.data * ia, b.data * ib

    def bw(g):
        dahat = g @ bhat
        dbhat = g.T @ ahat
        da = (dahat - ahat * (dahat * ahat).sum(axis=1, keepdims=True)) * ia
        db = (dbhat - bhat * (dbhat * bhat).sum(axis=1, keepdims=True)) * ib
        return da, db

    return _make(ahat @ bhat.T, (a, b), bw, "cosine_matrix")


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors (0 when either is a zero vector)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape or a.shape[0] < 1:
        raise DimensionError(f"cosine_sim needs equal-length vectors, got {a.shape}, {b.shape}")
    return reshape(cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1))), ())


def gru(gx, u, bh) -> Tensor:
    """Run a GRU layer over time from a zero initial state.

    ``gx`` [B, T, 3H] holds the input projections (bias included) for the
    update, reset and candidate gates, in that order. ``u`` [H, 3H] and
    ``bh`` [3H] are the recurrent weights and bias. Returns the hidden states
    [B, T, H]; step t depends only on inputs 0..t.
    """
    gx, u, bh = _as_tensor(gx), _as_tensor(u), _as_tensor(bh)
    B, T, H3 = gx.shape
    H = H3 // 3
    if u.shape != (H, H3) or bh.shape != (H3,):
        raise DimensionError(f"gru weights {u.shape}/{bh.shape} do not match input width {H3}")
    gxd, ud, bhd = gx.data, u.data, bh.data
    hs = np.zeros((B, T + 1, H))
    zs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    hn = np.empty((B, T, H))
    for t in range(T):
        h = hs[:, t]
        gh = h @ ud + bhd
        z = _sigmoid(gxd[:, t, :H] + gh[:, :H])
        r = _sigmoid(gxd[:, t, H : 2 * H] + gh[:, H : 2 * H])
        n = np.tanh(gxd[:, t, 2 * H :] + r * gh[:, 2 * H :])
        hs[:, t + 1] = (1.0 - z) * n + z * h
        zs[:, t], rs[:, t], ns[:, t], hn[:, t] = z, r, n, gh[:, 2 * H :]

    def bw(g):
        dgx = np.empty((B, T, H3))
        du = np.zeros_like(ud)
        dbh = np.zeros_like(bhd)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            z, r, n, h = zs[:, t], rs[:, t], ns[:, t], hs[:, t]
            dan = dh * (1.0 - z) * (1.0 - n * n)
            daz = dh * (h - n) * z * (1.0 - z)
            dar = dan * hn[:, t] * r * (1.0 - r)
            dgx[:, t, :H] = daz
            dgx[:, t, H : 2 * H] = dar
            dgx[:, t, 2 * H :] = dan
            dgh = np.concatenate([daz, dar, dan * r], axis=1)
            du += h.T @ dgh
            dbh += dgh.sum(axis=0)
            dh = dh * z + dgh @ ud.T
        return dgx, du, dbh

    return _make(hs[:, 1:].copy(), (gx, u, bh), bw, "gru")


# ---------------------------------------------------------------------------
# optimisation and checking


class SGD:
    """Plain stochastic gradient descent with a fixed learning rate."""

    def __init__(self, params: Iterable[Tensor], lr: float):
        if lr <= 0:
            raise InputError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


def numerical_grad(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(build_loss: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over ``params``."""
    for p in params:
        p.grad = None
    loss = build_loss()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return build_loss().item()

    worst = 0.0
    for p, a in zip(params, analytic):
        worst = max(worst, relative_error(a, numerical_grad(value, p, h)))
    for p in params:
        p.grad = None
    return worst
