"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what a small Transformer needs: broadcasting arithmetic, batched
matmul, masked softmax, layer norm, embedding lookup and the two losses used
in training (label-smoothed cross-entropy and KL divergence).

Every operation whose inputs require gradients appends a node to the active
:class:`Tape`. Nodes are appended in execution order, so the tape is already
topologically sorted and :func:`backward` is a single reverse sweep.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError, NumericalError

DTYPE = np.float64
KL_FLOOR = 1e-12
LN_EPS = 1e-5

_local = threading.local()


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "index")

    def __init__(self, out, parents, backward_fn, index):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to scope recording to one training step::

        with Tape() as tape:
            loss = model.loss(batch)
            tape.backward(loss)

    Outside any ``with`` block operations go to a per-thread default tape,
    which is replaced by a fresh one after each :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by backward(); call reset() first")
        node = _Node(out, parents, backward_fn, len(self.nodes))
        self.nodes.append(node)
        out._node = node
        out._tape = self

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
            node.out._tape = None
        self.nodes = []
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        backward(loss)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape:
    stack = _tape_stack()
    if stack:
        return stack[-1]
    default = getattr(_local, "default", None)
    if default is None or default.consumed:
        default = _local.default = Tape()
    return default


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording; used for decoding and finite differences."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """n-dimensional float64 array with an optional gradient.

    ``data`` is a C-contiguous numpy array, which gives the row-major flat
    layout with ``product(shape) == data.size`` for free.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out._tape = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        current_tape().record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _result(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx], dtype=DTYPE), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _result(ad @ bd, (a, b), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the used rows."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DataError(f"token id out of range for vocabulary of size {vocab}")

    def bw(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0.

    Raises NumericalError if some slice has no unmasked position.
    """
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(mask, axis=axis)):
            raise NumericalError("softmax over a fully masked slice (empty read context)")
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_label_smoothed(logits: Tensor, targets, epsilon: float = 0.0,
                                 pad_id: int = 0) -> Tensor:
    """Mean label-smoothed NLL over non-pad positions.

    The smoothed target puts ``1 - epsilon`` on the gold id and spreads
    ``epsilon`` uniformly over all ``V`` entries.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ContractError(f"label smoothing epsilon must be in [0, 1), got {epsilon}")
    vocab = logits.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    flat = logits.data.reshape(-1, vocab)
    if tgt.shape[0] != flat.shape[0]:
        raise DimensionError(f"{flat.shape[0]} logit rows vs {tgt.shape[0]} targets")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise DataError("target id out of range")
    keep = tgt != pad_id
    count = int(keep.sum())
    if count == 0:
        raise DataError("every target position is padding")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(tgt.shape[0])
    q = np.full(flat.shape, epsilon / vocab)
    q[rows, tgt] += 1.0 - epsilon
    per_pos = -(q * logp).sum(axis=1)
    loss = float((per_pos * keep).sum() / count)
    shape = logits.shape

    def bw(g):
        grad = (np.exp(logp) - q) * (keep[:, None] / count)
        return ((g * grad).reshape(shape),)

    return _result(np.asarray(loss, dtype=DTYPE), (logits,), bw)


def kl_divergence(p, q: Tensor, check: bool = True) -> Tensor:
    """D_KL(p || q) along the last axis, q floored at ``KL_FLOOR``.

    ``p`` is the reference distribution and is treated as a constant.
    Returns a scalar for 1-D inputs, otherwise one value per leading index.
    """
    q = as_tensor(q)
    pd = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=DTYPE)
    if pd.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {pd.shape} vs {q.shape}")
    if check:
        for name, arr in (("p", pd), ("q", q.data)):
            if np.any(np.abs(arr.sum(axis=-1) - 1.0) > 1e-6) or np.any(arr < 0):
                raise ContractError(f"{name} is not a probability distribution")
    qf = np.maximum(q.data, KL_FLOOR)
    pos = pd > 0
    terms = np.where(pos, pd * (np.log(np.where(pos, pd, 1.0)) - np.log(qf)), 0.0)
    out = terms.sum(axis=-1)

    def bw(g):
        g = np.expand_dims(g, -1)
        return (g * np.where(q.data > KL_FLOOR, -pd / qf, 0.0),)

    return _result(np.asarray(out, dtype=DTYPE), (q,), bw)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate, so call ``zero_grad`` between steps. The tape
    is consumed: a second call on the same tape raises ContractError.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or loss._tape is None:
        raise ContractError("loss is detached: it was not recorded on any tape")
    tape = loss._tape
    if tape.consumed:
        raise ContractError("backward already ran on this tape; reset it first")
    if not np.isfinite(loss.data).all():
        raise NumericalError(f"non-finite loss {loss.data}")
    pending = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for n in reversed(tape.nodes[: node.index + 1]):
        g = pending.pop(id(n.out), None)
        if g is None:
            continue
        for parent, pg in zip(n.parents, n.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is not None and parent._tape is tape:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
            else:
                if not np.isfinite(pg).all():
                    raise NumericalError(f"non-finite gradient for {parent.name or parent.shape}")
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    tape.consumed = True


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6,
               coords: Optional[Iterable[int]] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``coords`` optionally restricts the check to a subset of flat indices.
    Raises ContractError if ``f`` is not deterministic.
    """
    base = x.data.astype(DTYPE).copy()
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        tape.backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    with no_grad():
        v0 = float(f(Tensor(base.copy())).data)
        v1 = float(f(Tensor(base.copy())).data)
        if v0 != v1:
            raise ContractError("function is not deterministic; gradient check is meaningless")
        flat = base.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = old - h
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = old
            num = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - num) / max(1e-8, abs(num))
            worst = max(worst, err)
    return worst
