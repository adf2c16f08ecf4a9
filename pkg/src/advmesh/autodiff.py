"""Define-by-run reverse-mode differentiation on numpy arrays.

A :class:`Tape` records primitive operations as they execute; ``backward``
replays the recorded vector-Jacobian products in reverse topological order.
Everything is float64.  Tapes are rebuilt every iteration and never shared
between concurrent evaluations.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NotScalarLoss(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class Tensor:
    """A numpy array with an optional gradient requirement."""

    __slots__ = ("values", "requires_grad", "_id")

    _counter = 0

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        Tensor._counter += 1
        self._id = Tensor._counter

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "parents", "vjps")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], vjps: Sequence[Callable]):
        self.out = out
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)


class Tape:
    """Ordered record of primitive ops plus a named parameter registry."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}

    def watch(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def record(self, out: Tensor, parents: Sequence[Tensor], vjps: Sequence[Callable]):
        self._nodes.append(_Node(out, parents, vjps))

    def __len__(self):
        return len(self._nodes)


# the active tape; ops record onto it when set
_ACTIVE: list[Tape] = []


class active_tape:
    """Context manager installing a tape for recording."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self):
        _ACTIVE.append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents, vjps):
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, vjps)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches the parent's shape."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Accumulate gradients of a scalar loss over the tape's parameters."""
    if np.ndim(loss.values) != 0 and np.size(loss.values) != 1:
        raise NotScalarLoss(f"loss has shape {np.shape(loss.values)}")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.values)}
    for node in reversed(tape._nodes):
        g_out = grads.pop(node.out._id, None)
        if g_out is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad or vjp is None:
                continue
            g = vjp(g_out)
            if g is None:
                continue
            g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.values.shape)
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + g
            else:
                grads[parent._id] = g
    out = {}
    for name, p in tape.params.items():
        g = grads.get(p._id)
        if g is None:
            g = np.zeros_like(p.values)
        out[name] = Tensor(g)
    return out


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values + b.values)
    return _record(out, (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values - b.values)
    return _record(out, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values * b.values)
    return _record(out, (a, b), (lambda g: g * b.values, lambda g: g * a.values))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values / b.values)
    return _record(
        out,
        (a, b),
        (lambda g: g / b.values, lambda g: -g * a.values / (b.values**2)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.values)
    return _record(out, (a,), (lambda g: -g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.values @ b.values)

    def vjp_a(g):
        if b.values.ndim == 1:
            return np.outer(g, b.values) if a.values.ndim == 2 else g * b.values
        return g @ b.values.T if a.values.ndim >= 2 else b.values @ g

    def vjp_b(g):
        if a.values.ndim == 1:
            return np.outer(a.values, g) if b.values.ndim == 2 else g * a.values
        return a.values.T @ g

    return _record(out, (a, b), (vjp_a, vjp_b))


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.values.shape)
        return np.broadcast_to(np.expand_dims(g, axis), a.values.shape)

    return _record(out, (a,), (vjp,))


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values.mean(axis=axis))
    n = a.values.size if axis is None else a.values.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.values.shape)
        return np.broadcast_to(np.expand_dims(g, axis) / n, a.values.shape)

    return _record(out, (a,), (vjp,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.values, 0.0))
    mask = a.values > 0.0
    return _record(out, (a,), (lambda g: g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.values))
    out = Tensor(s)
    return _record(out, (a,), (lambda g: g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.values)
    out = Tensor(t)
    return _record(out, (a,), (lambda g: g * (1.0 - t * t),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.values))
    return _record(out, (a,), (lambda g: g / a.values,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.values)
    out = Tensor(e)
    return _record(out, (a,), (lambda g: g * e,))


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values**p)
    return _record(out, (a,), (lambda g: g * p * a.values ** (p - 1),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.clip(a.values, lo, hi))
    mask = (a.values >= lo) & (a.values <= hi)
    return _record(out, (a,), (lambda g: g * mask,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.values.reshape(shape))
    return _record(out, (a,), (lambda g: g.reshape(a.values.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.transpose(a.values, axes))
    inv = None if axes is None else np.argsort(axes)
    return _record(out, (a,), (lambda g: np.transpose(g, inv),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.values.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(out, tensors, [make_vjp(i) for i in range(len(tensors))])


def gather_rows(a, idx) -> Tensor:
    """Select rows of a 2D (or 1D) tensor by integer index array."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.values[idx])

    def vjp(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, idx, g)
        return grad

    return _record(out, (a,), (vjp,))


def max_(a, axis=None) -> Tensor:
    """Max reduction; ties route gradient to the lowest flat index."""
    a = _as_tensor(a)
    if axis is None:
        out = Tensor(a.values.max())
        arg = int(np.argmax(a.values))

        def vjp(g):
            grad = np.zeros_like(a.values)
            grad.flat[arg] = g
            return grad

        return _record(out, (a,), (vjp,))
    out = Tensor(a.values.max(axis=axis))
    arg = np.argmax(a.values, axis=axis)

    def vjp_ax(g):
        grad = np.zeros_like(a.values)
        idx = list(np.indices(out.values.shape))
        idx.insert(axis if axis >= 0 else a.values.ndim + axis, arg)
        grad[tuple(idx)] = g
        return grad

    return _record(out, (a,), (vjp_ax,))


def max_pool_points(features) -> Tensor:
    """Global max pool over the point axis of an (N, C) feature tensor.

    Gradient routes to the argmax point per channel (first index on ties).
    """
    return max_(features, axis=0)


def dense(W, b, x) -> Tensor:
    """Affine layer x @ W + b, x of shape (N, in) or (in,)."""
    W, b, x = _as_tensor(W), _as_tensor(b), _as_tensor(x)
    if x.values.shape[-1] != W.values.shape[0]:
        raise ShapeMismatch(
            f"dense: x last dim {x.values.shape[-1]} != W rows {W.values.shape[0]}"
        )
    return add(matmul(x, W), b)


def custom_op(forward_values, parents, vjps) -> Tensor:
    """Record an externally computed op with explicit VJP callables."""
    out = Tensor(forward_values)
    return _record(out, tuple(parents), tuple(vjps))


# operator sugar
Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__rtruediv__ = lambda self, o: div(o, self)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.__neg__ = lambda self: neg(self)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[1] - kh) // stride + 1
    ow = (x.shape[2] - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (c, oh, ow, kh, kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d(K, bias, x, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution (cross-correlation): x (Cin,H,W), K (Cout,Cin,kh,kw)."""
    K, bias, x = _as_tensor(K), _as_tensor(bias), _as_tensor(x)
    co, ci, kh, kw = K.values.shape
    if x.values.ndim != 3 or x.values.shape[0] != ci:
        raise ShapeMismatch(
            f"conv2d: input shape {x.values.shape} incompatible with kernel {K.values.shape}"
        )
    cols, oh, ow = _im2col(x.values, kh, kw, stride, pad)
    kmat = K.values.reshape(co, ci * kh * kw)
    out_vals = (cols @ kmat.T).T.reshape(co, oh, ow) + bias.values[:, None, None]
    out = Tensor(out_vals)

    def vjp_K(g):
        gm = g.reshape(co, oh * ow)
        return (gm @ cols).reshape(co, ci, kh, kw)

    def vjp_b(g):
        return g.sum(axis=(1, 2))

    def vjp_x(g):
        gm = g.reshape(co, oh * ow).T  # (ohw, co)
        gcols = gm @ kmat  # (ohw, ci*kh*kw)
        h, w = x.values.shape[1], x.values.shape[2]
        hp, wp = h + 2 * pad, w + 2 * pad
        grad = np.zeros((ci, hp, wp))
        gcols = gcols.reshape(oh, ow, ci, kh, kw)
        for di in range(kh):
            for dj in range(kw):
                grad[:, di : di + oh * stride : stride, dj : dj + ow * stride : stride] += (
                    gcols[:, :, :, di, dj].transpose(2, 0, 1)
                )
        if pad:
            grad = grad[:, pad : pad + h, pad : pad + w]
        return grad

    return _record(out, (K, bias, x), (vjp_K, vjp_b, vjp_x))


# ---------------------------------------------------------------------------
# finite-difference verification oracle


def finite_diff_check(f, params: dict[str, np.ndarray], step: float = 1e-5):
    """Compare backward() gradients of f against central finite differences.

    ``f`` maps a dict of parameter Tensors (already watched on a fresh tape)
    to a scalar Tensor.  Returns a report dict with per-parameter and overall
    max relative error.
    """

    def run(values: dict[str, np.ndarray]):
        tape = Tape()
        tensors = {k: tape.watch(k, Tensor(v)) for k, v in values.items()}
        with active_tape(tape):
            loss = f(tensors)
        return tape, loss

    tape, loss = run(params)
    grads = backward(tape, loss)

    report = {"per_param": {}, "max_rel_err": 0.0}
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        fd = np.zeros_like(base)
        flat = base.ravel()
        for i in range(flat.size):
            plus = base.copy()
            plus.flat[i] += step
            minus = base.copy()
            minus.flat[i] -= step
            vals_p = dict(params)
            vals_p[name] = plus
            vals_m = dict(params)
            vals_m[name] = minus
            _, lp = run(vals_p)
            _, lm = run(vals_m)
            fd.flat[i] = (float(lp.values) - float(lm.values)) / (2 * step)
        g = grads[name].values
        # floor keeps near-zero entries from amplifying FD rounding noise
        denom = np.maximum(np.abs(fd), np.maximum(np.abs(g), 1e-2))
        rel = np.abs(g - fd) / denom
        err = float(rel.max()) if rel.size else 0.0
        report["per_param"][name] = err
        report["max_rel_err"] = max(report["max_rel_err"], err)
    return report
