"""Minimal reverse-mode tape over the kernels in :mod:`smalldepth.tensor`.

Every op takes plain arrays or :class:`Var` values. When no argument is a
``Var`` the op returns a plain array and records nothing, so model code is
written once and runs both eagerly and under a tape.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("data", "tape", "idx")

    def __init__(self, data: np.ndarray, tape: "GradTape", idx: int):
        self.data = data
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, idx={self.idx})"


class GradTape:
    """Records ops in execution order; ``backward`` replays them in reverse."""

    def __init__(self):
        self._nodes: list[tuple[tuple[Var | None, ...], object]] = []
        self._leaves: dict[str, Var] = {}
        self.consumed = False

    def leaf(self, name: str, value) -> Var:
        if name in self._leaves:
            return self._leaves[name]
        v = self._new(np.asarray(value), (), None)
        self._leaves[name] = v
        return v

    @property
    def leaves(self) -> dict[str, Var]:
        return dict(self._leaves)

    def _new(self, data, parents, vjp) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        v = Var(data, self, len(self._nodes))
        self._nodes.append((parents, vjp))
        return v

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        self.consumed = True
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[loss.idx] = np.ones_like(loss.data)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            parents, vjp = self._nodes[idx]
            if g is None or vjp is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if p is None or pg is None:
                    continue
                grads[p.idx] = pg if grads[p.idx] is None else grads[p.idx] + pg
        out = {}
        for name, v in self._leaves.items():
            g = grads[v.idx]
            out[name] = np.zeros_like(v.data) if g is None else g
        return out


def tape_backward(tape: GradTape, loss: Var) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def value(x):
    return x.data if isinstance(x, Var) else np.asarray(x)


def _operands(a, b):
    """Arrays for a binary op; a bare Python number takes the other operand's float dtype."""
    av, bv = value(a), value(b)
    if isinstance(a, (int, float)) and bv.dtype.kind == "f":
        av = np.asarray(a, dtype=bv.dtype)
    elif isinstance(b, (int, float)) and av.dtype.kind == "f":
        bv = np.asarray(b, dtype=av.dtype)
    return av, bv


def _tape_of(*args) -> GradTape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise TapeError("operands recorded on different tapes")
            tape = a.tape
    return tape


def _record(data, args, vjp):
    tape = _tape_of(*args)
    if tape is None:
        return data
    parents = tuple(a if isinstance(a, Var) else None for a in args)
    return tape._new(data, parents, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise


def add(a, b):
    av, bv = _operands(a, b)
    return _record(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _operands(a, b)
    return _record(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _operands(a, b)
    return _record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = _operands(a, b)
    out = av / bv
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def exp(x):
    out = np.exp(value(x))
    return _record(out, (x,), lambda g: (g * out,))


def log(x):
    xv = value(x)
    return _record(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x):
    out = np.sqrt(value(x))
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def abs(x):  # noqa: A001
    xv = value(x)
    return _record(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def relu(x):
    xv = value(x)
    mask = xv > 0
    return _record(np.where(mask, xv, 0).astype(xv.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    out = T.sigmoid(value(x))
    return _record(out, (x,), lambda g: (g * out * (1 - out),))


# reductions and reshaping


def reduce_sum(x, axes=None):
    xv = value(x)
    ax = T._norm_axes(axes)
    out = xv.sum(axis=ax, keepdims=axes is not None)
    return _record(out, (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def reduce_mean(x, axes=None):
    xv = value(x)
    T._nonempty(xv, axes)
    ax = T._norm_axes(axes)
    count = xv.size if ax is None else int(np.prod([xv.shape[a] for a in ax]))
    out = xv.mean(axis=ax, keepdims=axes is not None)
    return _record(out, (x,), lambda g: (np.broadcast_to(g / count, xv.shape).copy(),))


def reduce_var(x, axes=None):
    mu = reduce_mean(x, axes)
    d = sub(x, mu)
    return reduce_mean(mul(d, d), axes)


def reshape(x, shape):
    xv = value(x)
    return _record(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def flip(x, axis="width"):
    ax = T._axis(axis)
    return _record(np.flip(value(x), axis=ax).copy(), (x,), lambda g: (np.flip(g, axis=ax).copy(),))


def diff(x, axis="width"):
    """Forward difference x[i+1] - x[i] along an axis."""
    ax = T._axis(axis)
    xv = value(x)

    def vjp(g):
        gx = np.zeros_like(xv, dtype=g.dtype)
        hi = [slice(None)] * xv.ndim
        lo = [slice(None)] * xv.ndim
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        gx[tuple(hi)] += g
        gx[tuple(lo)] -= g
        return (gx,)

    return _record(np.diff(xv, axis=ax), (x,), vjp)


def log_softmax(x, axis="channel"):
    ax = T._axis(axis)
    out = T.log_softmax_axis(value(x), ax)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _record(out, (x,), vjp)


def softmax(x, axis="channel"):
    return exp(log_softmax(x, axis))


# structured kernels


def conv2d(x, w, spec: T.ConvSpec, b=None):
    xv, wv = value(x), value(w)
    bv = None if b is None else value(b)
    out = T.conv2d(xv, spec, wv, bv)
    in_hw = xv.shape[2:]

    def vjp(g):
        gx = T.conv2d_grad_input(g, spec, wv, in_hw) if isinstance(x, Var) else None
        gw = T.conv2d_grad_weight(g, spec, xv) if isinstance(w, Var) else None
        gb = g.sum(axis=(0, 2, 3)) if isinstance(b, Var) else None
        return gx, gw, gb

    return _record(out, (x, w, b), vjp)


def bilinear_resize(x, out_h, out_w):
    xv = value(x)
    h, w = xv.shape[2:]
    return _record(
        T.bilinear_resize(xv, out_h, out_w), (x,), lambda g: (T.bilinear_resize_adjoint(g, h, w),)
    )


def pad_kernel(w, k_h, k_w):
    wv = value(w)
    kh, kw = wv.shape[2:]
    return _record(T.pad_kernel(wv, k_h, k_w), (w,), lambda g: (T.crop_kernel(g, kh, kw).copy(),))


def finite_difference_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of one array (float64 oracle)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
