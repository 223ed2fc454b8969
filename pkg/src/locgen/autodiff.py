"""A small reverse-mode autodiff engine over numpy arrays.

Operations are recorded on the active :class:`Tape` (``with Tape() as t:``)
whenever at least one input requires a gradient. :func:`backward` walks the
tape once in reverse and returns gradients keyed by tensor id.

Training runs in float32; gradient checks run in float64 (the dtype of the
inputs is preserved throughout).
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @classmethod
    def wrap(cls, data, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        """Like the constructor but without copying ``data``."""
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.id = next(_ids)
        t.name = name
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(_as_tensor(o, self)))

    def __rsub__(self, o):
        return add(_as_tensor(o, self), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, op: str, out: Tensor, inputs: tuple, vjp: Callable):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications (already topologically sorted)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor.wrap(np.asarray(x, dtype=dtype))


def _record(op: str, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.wrap(out_data, requires_grad=needs)
    if needs and _active:
        _active[-1].nodes.append(Node(op, out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- primitives -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def mask_add(x: Tensor, mask: np.ndarray) -> Tensor:
    """``x + mask`` for a constant (non-differentiable) additive mask."""
    try:
        out = x.data + mask.astype(x.data.dtype, copy=False)
    except ValueError:
        raise ShapeError(f"mask_add: incompatible shapes {x.shape} and {mask.shape}") from None
    xs = x.shape
    return _record("mask_add", out, (x,), lambda g: (_unbroadcast(g, xs),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # fold batch dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2
    else:
        out = np.matmul(ad, bd)

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", out, (a, b), vjp)


def embedding_lookup(table: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table {table.shape}")
    ts = table.shape

    def vjp(g):
        gt = np.zeros(ts, dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, ts[1]))
        return (gt,)

    return _record("embedding_lookup", table.data[idx], (table,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data

    def vjp(g):
        gg = _unbroadcast(g * xhat, (d,))
        gb = _unbroadcast(g, (d,))
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record("layernorm", xhat * gd + bias.data, (x, gain, bias), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (x,), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation, as in GPT-2."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _record("gelu", out, (x,), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    xs = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {xs} to {shape}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(xs),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    xs, dt = x.shape, x.data.dtype

    def vjp(g):
        gx = np.zeros(xs, dtype=dt)
        gx[idx] = g
        return (gx,)

    return _record("getitem", x.data[idx], (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}") from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    xs = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xs).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-item ``-log softmax(logits)[target]``; shape ``logits.shape[:-1]``."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy_with_logits: targets {targets.shape} vs logits {logits.shape}")
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ShapeError(f"cross_entropy_with_logits: target outside [0, {V})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)

    return _record("cross_entropy_with_logits", -picked, (logits,), vjp)


def log_sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.minimum(xd, 0) - np.log1p(np.exp(-np.abs(xd)))
    return _record("log_sigmoid", out, (x,), lambda g: (g * (1.0 / (1.0 + np.exp(xd))),))


# -- reverse pass -----------------------------------------------------------

def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None):
    """Gradients of scalar ``loss``.

    Returns a dict keyed by tensor id covering every tensor reached from
    ``loss``. If ``wrt`` is given, returns a list aligned with it instead,
    with zeros for tensors that did not influence the loss.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out.id)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    if wrt is None:
        return grads
    return [grads.get(t.id, np.zeros_like(t.data)) for t in wrt]


def value_and_grad(f: Callable, params: dict[str, np.ndarray]):
    """Evaluate ``f(tensors)`` on a fresh tape; return (loss value, grads dict by name)."""
    tensors = {k: Tensor.wrap(v, requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        loss = f(tensors)
    names = list(tensors)
    gs = backward(tape, loss, [tensors[k] for k in names])
    return float(loss.data), dict(zip(names, gs))


def grad_check(f: Callable, params: dict[str, np.ndarray], eps: float = 1e-5,
               n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` maps a dict of Tensors to a scalar Tensor and must be deterministic.
    Parameters are promoted to float64. At most ``n_coords`` coordinates are
    sampled (all of them if there are fewer).
    """
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, g_ad = value_and_grad(f, p64)
    coords = [(k, i) for k, v in p64.items() for i in range(v.size)]
    rs = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rs.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def evaluate():
        with Tape():
            v = f({k: Tensor.wrap(a) for k, a in p64.items()})
        v = float(v.data)
        if not math.isfinite(v):
            raise FloatingPointError("grad_check: non-finite function value")
        return v

    worst = 0.0
    for k, i in coords:
        flat = p64[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate()
        flat[i] = orig - eps
        fm = evaluate()
        flat[i] = orig
        fd = (fp - fm) / (2 * eps)
        ad = float(g_ad[k].reshape(-1)[i])
        if not (math.isfinite(ad) and math.isfinite(fd)):
            raise FloatingPointError(f"grad_check: non-finite gradient at {k}[{i}]")
        worst = max(worst, abs(ad - fd) / max(1e-8, abs(ad) + abs(fd)))
    return worst
