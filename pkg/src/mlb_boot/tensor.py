"""Dense tensors with a recording tape for reverse- and forward-mode derivatives.

Every operation the segmentation network needs is defined here together with
its vector-Jacobian product (reverse mode) and Jacobian-vector product
(forward mode).  Operations record onto the :class:`GradTape` owning their
inputs; operations on untaped inputs just compute values.

All arithmetic is float64.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Incompatible operand shapes for an operation."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """Immutable float64 array, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Optional["GradTape"] = None, node: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        taped = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{taped})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("inputs", "vjp", "jvp")

    def __init__(self, inputs, vjp, jvp):
        self.inputs = inputs
        self.vjp = vjp
        self.jvp = jvp


class Tangents:
    """Forward-mode tangents of every value recorded on a tape."""

    def __init__(self, tape: "GradTape", values: list):
        self._tape = tape
        self._values = values

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            return np.zeros(t.shape)
        v = self._values[t.node]
        return np.zeros(t.shape) if v is None else v


class GradTape:
    """Records operations in execution order.

    One tape per worker; tapes are not thread-safe.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def watch(self, value) -> Tensor:
        """Register a leaf (e.g. a parameter) and return its taped tensor."""
        t = Tensor(value, self, len(self._nodes))
        self._nodes.append(_Node((), None, None))
        return t

    def params(self, params: Mapping[str, np.ndarray]) -> dict:
        return {name: self.watch(v) for name, v in params.items()}

    def _record(self, value, inputs, vjp, jvp) -> Tensor:
        t = Tensor(value, self, len(self._nodes))
        self._nodes.append(_Node(inputs, vjp, jvp))
        return t

    def gradient(self, loss: Tensor, sources):
        """Reverse-mode gradient of scalar ``loss`` w.r.t. ``sources``.

        ``sources`` is a mapping (returns a dict with the same keys) or a
        sequence of tensors.  Sources the loss does not reach get zeros.
        """
        if loss.data.size != 1:
            raise ShapeError("gradient", f"loss must be scalar, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("gradient: loss was not recorded on this tape")
        grads: list = [None] * len(self._nodes)
        grads[loss.node] = np.ones(loss.shape)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            node = self._nodes[i]
            if g is None or not node.inputs:
                continue
            needs = tuple(k is not None for k in node.inputs)
            for k, gk in zip(node.inputs, node.vjp(g, needs)):
                if k is None or gk is None:
                    continue
                grads[k] = gk if grads[k] is None else grads[k] + gk

        def pick(t: Tensor):
            if t.tape is not self:
                raise ValueError("gradient: source not recorded on this tape")
            g = grads[t.node]
            return np.zeros(t.shape) if g is None else g

        if isinstance(sources, Mapping):
            return {k: pick(t) for k, t in sources.items()}
        return [pick(t) for t in sources]

    def tangents(self, seeds) -> Tangents:
        """Propagate input tangents forward through the recorded graph.

        ``seeds`` maps leaf tensors to direction arrays of the same shape
        (a dict keyed by tensor, or pairs).
        """
        values: list = [None] * len(self._nodes)
        items = seeds.items() if isinstance(seeds, Mapping) else seeds
        for t, v in items:
            v = np.asarray(v, dtype=np.float64)
            if t.tape is not self:
                raise ValueError("tangents: seed tensor not recorded on this tape")
            if v.shape != t.shape:
                raise ShapeError("tangents", f"direction shape {v.shape} != value shape {t.shape}")
            values[t.node] = v
        for i, node in enumerate(self._nodes):
            if not node.inputs:
                continue
            ins = [None if k is None else values[k] for k in node.inputs]
            if all(v is None for v in ins):
                continue
            values[i] = node.jvp(ins)
        return Tangents(self, values)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(op: str, value: np.ndarray, inputs: Sequence, vjp: Callable, jvp: Callable) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError(f"{op}: inputs recorded on different tapes")
    if tape is None:
        return Tensor(value)
    idx = tuple(x.node if isinstance(x, Tensor) and x.tape is tape else None for x in inputs)
    return tape._record(value, idx, vjp, jvp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    A, B = _data(a), _data(b)
    _check_broadcast("add", A, B)

    def vjp(g, needs):
        return (_unbroadcast(g, A.shape) if needs[0] else None,
                _unbroadcast(g, B.shape) if needs[1] else None)

    def jvp(t):
        ta, tb = t
        if ta is None:
            return np.broadcast_to(tb, np.broadcast_shapes(A.shape, B.shape)).copy()
        if tb is None:
            return np.broadcast_to(ta, np.broadcast_shapes(A.shape, B.shape)).copy()
        return ta + tb

    return _make("add", A + B, (a, b), vjp, jvp)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    A, B = _data(a), _data(b)
    out_shape = _check_broadcast("mul", A, B)

    def vjp(g, needs):
        return (_unbroadcast(g * B, A.shape) if needs[0] else None,
                _unbroadcast(g * A, B.shape) if needs[1] else None)

    def jvp(t):
        ta, tb = t
        out = np.zeros(out_shape)
        if ta is not None:
            out = out + ta * B
        if tb is not None:
            out = out + A * tb
        return out

    return _make("mul", A * B, (a, b), vjp, jvp)


def square(x) -> Tensor:
    X = _data(x)
    return _make("square", X * X, (x,),
                 lambda g, needs: (2.0 * X * g,),
                 lambda t: 2.0 * X * t[0])


def relu(x) -> Tensor:
    X = _data(x)
    on = X > 0

    return _make("relu", np.where(on, X, 0.0), (x,),
                 lambda g, needs: (g * on,),
                 lambda t: t[0] * on)


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    X = _data(x)
    axes = _norm_axis(axis, X.ndim)
    out = X.sum(axis=axes, keepdims=keepdims)

    def expand(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, X.shape).copy()

    return _make("sum", out, (x,),
                 lambda g, needs: (expand(g),),
                 lambda t: t[0].sum(axis=axes, keepdims=keepdims))


def mean(x, axis=None, keepdims=False) -> Tensor:
    X = _data(x)
    n = int(np.prod([X.shape[a] for a in _norm_axis(axis, X.ndim)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------- softmax & co


def _softmax(X, axis):
    z = X - X.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = 1) -> Tensor:
    S = _softmax(_data(x), axis)

    def vjp(g, needs):
        return (S * (g - (g * S).sum(axis=axis, keepdims=True)),)

    def jvp(t):
        return S * (t[0] - (S * t[0]).sum(axis=axis, keepdims=True))

    return _make("softmax", S, (x,), vjp, jvp)


def log_softmax(x, axis: int = 1) -> Tensor:
    X = _data(x)
    z = X - X.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    S = np.exp(out)

    def vjp(g, needs):
        return (g - S * g.sum(axis=axis, keepdims=True),)

    def jvp(t):
        return t[0] - (S * t[0]).sum(axis=axis, keepdims=True)

    return _make("log_softmax", out, (x,), vjp, jvp)


# --------------------------------------------------------------- convolution


def _im2col(X, k, stride, pad):
    """Rows are output pixels (b, i, j); columns are (di, dj, cin)."""
    B, C, H, W = X.shape
    Xh = np.zeros((B, H + 2 * pad, W + 2 * pad, C))
    Xh[:, pad:pad + H, pad:pad + W, :] = X.transpose(0, 2, 3, 1)
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = np.empty((B, Ho, Wo, k, k, C))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = Xh[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :]
    return cols.reshape(B * Ho * Wo, k * k * C), (B, Ho, Wo)


def _from_rows(m, B, Ho, Wo):
    return m.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2)


def _to_rows(a):
    return a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])


def conv2d(x, w, b=None, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """2D cross-correlation of ``x[B,Cin,H,W]`` with ``w[Cout,Cin,k,k]``, zero padded."""
    X, Wt = _data(x), _data(w)
    if X.ndim != 4 or Wt.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and kernel, got {X.shape} and {Wt.shape}")
    cout, cin, kh, kw = Wt.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", f"kernel must be square and odd-sized, got {kh}x{kw}")
    if X.shape[1] != cin:
        raise ShapeError("conv2d", f"input has {X.shape[1]} channels, kernel expects {cin}")
    Bv = None
    if b is not None:
        Bv = _data(b)
        if Bv.shape != (cout,):
            raise ShapeError("conv2d", f"bias shape {Bv.shape} != ({cout},)")
    k = kh
    pad = k // 2 if padding is None else padding
    Hp, Wp = X.shape[2] + 2 * pad, X.shape[3] + 2 * pad
    if Hp < k or Wp < k:
        raise ShapeError("conv2d", f"input {X.shape[2]}x{X.shape[3]} too small for kernel {k}")
    cols, (B, Ho, Wo) = _im2col(X, k, stride, pad)
    Wm = Wt.transpose(0, 2, 3, 1).reshape(cout, -1)
    rows = cols @ Wm.T
    if Bv is not None:
        rows += Bv
    out = _from_rows(rows, B, Ho, Wo)

    def vjp(g, needs):
        gx = gw = gb = None
        gm = _to_rows(g)
        if needs[0]:
            dcols = (gm @ Wm).reshape(B, Ho, Wo, k, k, cin)
            gp = np.zeros((B, Hp, Wp, cin))
            for i in range(k):
                for j in range(k):
                    gp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride, :] += \
                        dcols[:, :, :, i, j, :]
            gx = gp[:, pad:Hp - pad, pad:Wp - pad, :].transpose(0, 3, 1, 2)
        if needs[1]:
            gw = (gm.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if len(needs) > 2 and needs[2]:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    def jvp(t):
        tx, tw = t[0], t[1]
        res = np.zeros((B * Ho * Wo, cout))
        if tx is not None:
            res += _im2col(tx, k, stride, pad)[0] @ Wm.T
        if tw is not None:
            res += cols @ tw.transpose(0, 2, 3, 1).reshape(cout, -1).T
        if len(t) > 2 and t[2] is not None:
            res += t[2]
        return _from_rows(res, B, Ho, Wo)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, vjp, jvp)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour upsampling by 2 along the last two axes."""
    X = _data(x)
    if X.ndim < 2:
        raise ShapeError("upsample2x", f"need at least 2 dims, got {X.shape}")
    up = lambda a: np.repeat(np.repeat(a, 2, axis=-2), 2, axis=-1)

    def vjp(g, needs):
        s = g.shape[:-2] + (X.shape[-2], 2, X.shape[-1], 2)
        return (g.reshape(s).sum(axis=(-3, -1)),)

    return _make("upsample2x", up(X), (x,), vjp, lambda t: up(t[0]))


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    arrs = [_data(x) for x in xs]
    ref = arrs[0].shape
    for a in arrs[1:]:
        if a.ndim != len(ref) or any(a.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)):
            raise ShapeError("concat", f"shapes {ref} and {a.shape} disagree off axis {axis}")
    splits = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def vjp(g, needs):
        return tuple(p if n else None for p, n in zip(np.split(g, splits, axis=axis), needs))

    def jvp(t):
        return np.concatenate([np.zeros(a.shape) if ti is None else ti for a, ti in zip(arrs, t)], axis=axis)

    return _make("concat", np.concatenate(arrs, axis=axis), tuple(xs), vjp, jvp)


def remap(x, src: np.ndarray) -> Tensor:
    """Gather pixels: ``out[..., o] = x[..., src[o]]``, zero where ``src[o] < 0``.

    ``src`` is an integer array of flat indices into the last two axes of ``x``
    and defines the output spatial shape.
    """
    X = _data(x)
    src = np.asarray(src)
    n_in = X.shape[-2] * X.shape[-1]
    if src.ndim != 2 or src.max(initial=-1) >= n_in:
        raise ShapeError("remap", f"index map {src.shape} incompatible with input {X.shape}")
    lead = X.shape[:-2]
    flat_src = src.ravel()
    ok = flat_src >= 0
    sel = flat_src[ok]

    def gather(a):
        a = a.reshape(lead + (n_in,))
        out = np.zeros(lead + (flat_src.size,))
        out[..., ok] = a[..., sel]
        return out.reshape(lead + src.shape)

    def vjp(g, needs):
        g = g.reshape(lead + (flat_src.size,))
        gi = np.zeros((int(np.prod(lead, dtype=int)), n_in))
        np.add.at(gi, (slice(None), sel), g[..., ok].reshape(gi.shape[0], -1))
        return (gi.reshape(X.shape),)

    return _make("remap", gather(X), (x,), vjp, lambda t: gather(t[0]))


def reshape(x, shape) -> Tensor:
    X = _data(x)
    try:
        out = X.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {X.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (x,),
                 lambda g, needs: (g.reshape(X.shape),),
                 lambda t: t[0].reshape(out.shape))


def stop_gradient(x) -> Tensor:
    return Tensor(_data(x))


def _check_direction(params: Mapping[str, np.ndarray], direction: Mapping[str, np.ndarray]) -> Iterable:
    if set(params) != set(direction):
        raise ValueError(f"direction keys {sorted(direction)} != parameter keys {sorted(params)}")
    for name, p in params.items():
        d = np.asarray(direction[name])
        if d.shape != np.shape(p):
            raise ShapeError("direction", f"{name}: shape {d.shape} != {np.shape(p)}")
        yield name, p, d


def reverse_grad(tape: GradTape, loss: Tensor, params: Mapping[str, Tensor]) -> dict:
    """Gradient of a scalar loss w.r.t. every taped parameter (zeros if unreached)."""
    return tape.gradient(loss, params)


def forward_tangent(tape: GradTape, params: Mapping[str, Tensor], direction: Mapping[str, np.ndarray]) -> Tangents:
    """Directional derivative of every recorded value along ``direction``."""
    seeds = {params[name]: d for name, _, d in
             _check_direction({k: v.data for k, v in params.items()}, direction)}
    return tape.tangents(seeds)
