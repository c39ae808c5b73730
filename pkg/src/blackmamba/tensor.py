"""Dense tensors on numpy with a scoped reverse-mode tape and FLOP attribution.

A :class:`Tape` is activated with ``with Tape() as tape:``; operations whose
inputs require gradients record a node on the active tape.  Outside a tape the
same functions are thin numpy wrappers, which is what the streaming paths use.

Matrix products are attributed ``2*K*M*J`` FLOPs on every active
:class:`FlopCounter`.
"""

from __future__ import annotations

import contextvars
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)
_active_counters: contextvars.ContextVar[tuple] = contextvars.ContextVar("flop_counters", default=())


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"unsupported element type {arr.dtype}")
        if arr.dtype.kind == "f" and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype if b.dtype.kind == "f" else None))
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype if a.dtype.kind == "f" else None))
    return as_tensor(a), as_tensor(b)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# --------------------------------------------------------------------------- tape


class Tape:
    """Records differentiable operations performed inside its ``with`` scope."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._tape = None
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf
                    pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        if loss._backward is None and loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        self.reset()


def current_tape() -> Tape | None:
    return _active_tape.get()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``; consumes the tape."""
    tape = tape or loss._tape or current_tape()
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        raise RuntimeError("loss was not recorded on a tape")
    tape.backward(loss)


def _make(data, parents: Sequence, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------- flops


class FlopCounter:
    """Accumulates matmul FLOPs (2*K*M*J each) while active.

    ``total`` holds matmul FLOPs only; ``by_tag`` splits them by call-site tag.
    ``extra`` holds non-matmul estimates that callers report separately.
    """

    def __init__(self):
        self.total = 0
        self.by_tag: dict[str, int] = defaultdict(int)
        self.extra: dict[str, int] = defaultdict(int)
        self.n_matmuls = 0
        self._token = None

    def __enter__(self) -> "FlopCounter":
        self._token = _active_counters.set(_active_counters.get() + (self,))
        return self

    def __exit__(self, *exc) -> None:
        _active_counters.reset(self._token)
        self._token = None

    def add_matmul(self, flops: int, tag: str = "") -> None:
        self.total += flops
        self.by_tag[tag] += flops
        self.n_matmuls += 1

    def add_extra(self, flops: int, tag: str) -> None:
        self.extra[tag] += flops


def charge_matmul(k: int, m: int, j: int, tag: str = "") -> None:
    """Attribute a ``(K, M) @ (M, J)`` product computed outside :func:`matmul`."""
    flops = 2 * int(k) * int(m) * int(j)
    for c in _active_counters.get():
        c.add_matmul(flops, tag)


def count_extra(flops: int, tag: str) -> None:
    for c in _active_counters.get():
        c.add_extra(int(flops), tag)


def matmul_flops(a_shape: tuple, b_shape: tuple) -> int:
    """``2*K*M*J`` for ``(..., K, M) @ (..., M, J)``, times the broadcast batch size."""
    m = a_shape[-1]
    k = a_shape[-2] if len(a_shape) > 1 else 1
    j = b_shape[-1] if len(b_shape) > 1 else 1
    if len(b_shape) <= 2:
        # plain weight matrix: every leading dim of a is a row
        k = int(np.prod(a_shape[:-1], dtype=np.int64)) if len(a_shape) > 1 else 1
        batch = 1
    else:
        batch = int(np.prod(np.broadcast_shapes(a_shape[:-2], b_shape[:-2]), dtype=np.int64))
    return 2 * batch * k * m * j


def _count_matmul(a_shape: tuple, b_shape: tuple, tag: str, counter: FlopCounter | None = None) -> None:
    flops = matmul_flops(a_shape, b_shape)
    counters = _active_counters.get()
    if counter is not None and counter not in counters:
        counter.add_matmul(flops, tag)
    for c in counters:
        c.add_matmul(flops, tag)


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def np_sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and avoids boolean-mask copies
    x = np.asarray(x)
    return (0.5 + 0.5 * np.tanh(0.5 * x)).astype(x.dtype, copy=False)


def np_softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x, 0.0).astype(x.dtype, copy=False)


def np_silu(x: np.ndarray) -> np.ndarray:
    return x * np_sigmoid(x)


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def np_layernorm(x: np.ndarray, gain: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = np_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np_softplus(a.data), (a,), lambda g: (g * np_sigmoid(a.data),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = np_sigmoid(a.data)

    def bw(g):
        return (g * (s + a.data * s * (1 - s)),)

    return _make(a.data * s, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    p = np_softmax(a.data, axis)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


_ACTIVATIONS = {
    "silu": silu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "exp": exp,
    "softmax": softmax,
}


def activation(x, kind: str) -> Tensor:
    """Apply ``silu``, ``softplus``, ``sigmoid``, ``exp`` or ``softmax`` (last axis)."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# --------------------------------------------------------------------------- shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), bw)


def scatter_rows(n_rows: int, rows: np.ndarray, values) -> Tensor:
    """Zero ``(n_rows, ...)`` tensor with ``values`` written at ``rows`` (rows unique)."""
    values = as_tensor(values)
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    out[rows] = values.data
    return _make(out, (values,), lambda g: (g[rows],))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# --------------------------------------------------------------------------- products


def matmul(a, b, tag: str = "", counter: FlopCounter | None = None) -> Tensor:
    """``a @ b`` with numpy semantics; attributes 2*K*M*J FLOPs to active counters."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    _count_matmul(a.shape, b.shape, tag, counter)
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(list(range(ad.ndim - 1)), list(range(g.ndim))))
            return ga, gb
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def matmul_counted(a, b, counter: FlopCounter, tag: str = "") -> Tensor:
    """Matrix product that charges exactly ``2*K*M*J`` to ``counter``."""
    return matmul(a, b, tag=tag, counter=counter)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable einsum for subscripts without repeated indices per operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    out = np.einsum(subscripts, *[o.data for o in ops], optimize=True)

    def bw(g):
        grads = []
        for i, sub_i in enumerate(in_subs):
            if not ops[i].requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            present = set(out_sub).union(*others) if others else set(out_sub)
            missing = [c for c in sub_i if c not in present]
            target = "".join(c for c in sub_i if c in present)
            expr = ",".join([out_sub] + others) + "->" + target
            gi = np.einsum(expr, g, *[ops[j].data for j in range(len(ops)) if j != i], optimize=True)
            if missing:
                # index summed away in forward: broadcast gradient back
                idx = [slice(None) if c in present else None for c in sub_i]
                gi = np.broadcast_to(gi[tuple(idx)], ops[i].shape)
            grads.append(gi)
        return tuple(grads)

    return _make(out, ops, bw)


# --------------------------------------------------------------------------- fused layers


def layernorm_nobias(x, gain, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis and scale by ``gain``; no additive bias."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"gain shape {gain.shape} does not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data

    def bw(g):
        ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain

    return _make(out, (x, gain), bw)


def np_causal_conv1d(x: np.ndarray, filters: np.ndarray, bias: np.ndarray) -> np.ndarray:
    width = filters.shape[1]
    length = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(width - 1, 0), (0, 0)]
    xp = np.pad(x, pad)
    out = np.broadcast_to(bias, x.shape).copy()
    for k in range(width):
        out += xp[..., k:k + length, :] * filters[:, k]
    return out


def causal_depthwise_conv1d(x, filters, bias) -> Tensor:
    """Per-channel causal convolution over the time axis (second to last).

    ``filters[:, -1]`` taps the current step, ``filters[:, 0]`` the oldest.
    Inputs are left-padded with ``C - 1`` zeros.
    """
    x, filters, bias = as_tensor(x), as_tensor(filters), as_tensor(bias)
    if filters.ndim != 2 or filters.shape[0] != x.shape[-1] or bias.shape != (x.shape[-1],):
        raise ShapeError(f"conv shapes disagree: x {x.shape}, filters {filters.shape}, bias {bias.shape}")
    width = filters.shape[1]
    length = x.shape[-2]
    count_extra(2 * x.size * width, "conv1d")
    out = np_causal_conv1d(x.data, filters.data, bias.data)

    def bw(g):
        pad = [(0, 0)] * (x.ndim - 2) + [(width - 1, 0), (0, 0)]
        xp = np.pad(x.data, pad)
        gp = np.zeros_like(xp)
        gf = np.zeros_like(filters.data)
        flat_g = g.reshape(-1, g.shape[-1])
        for k in range(width):
            gp[..., k:k + length, :] += g * filters.data[:, k]
            gf[:, k] = (xp[..., k:k + length, :].reshape(-1, g.shape[-1]) * flat_g).sum(axis=0)
        gx = gp[..., width - 1:, :]
        gb = flat_g.sum(axis=0)
        return gx, gf, gb

    return _make(out, (x, filters, bias), bw)


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over masked positions."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} not aligned with targets {targets.shape}")
    logp = log_softmax(logits, axis=-1)
    flat = reshape(logp, (-1, logits.shape[-1]))
    picked = getitem(flat, (np.arange(targets.size), targets.reshape(-1)))
    if mask is None:
        return -mean(picked)
    w = np.asarray(mask, dtype=logits.dtype).reshape(-1)
    total = w.sum()
    if total == 0:
        raise ValueError("mask selects no positions")
    return -tsum(picked * (w / total))


# --------------------------------------------------------------------------- oracle


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                         coords: Iterable[int] | None = None) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h``.

    ``coords`` restricts the evaluation to selected flat indices; the other
    entries of the result are left at zero.
    """
    base = np.array(_data(x), dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


__all__ = [name for name in dir() if not name.startswith("_") and name not in {"annotations"}]
