"""Dense float64 tensors with a recording tape and exact reverse-mode gradients.

Only the handful of primitives the toy encoder/decoders need are provided.
Every op records a node on the tape of its inputs; :func:`backward` walks
that tape once in reverse from a scalar root.

    >>> tape = Tape()
    >>> x = tape.param("x", np.array(3.0))
    >>> y = mul(x, x)
    >>> backward(tape, y)["x"]
    array(6.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    """A value recorded on a tape.

    ``value`` is an ``ndarray`` of float64 (row-major); ``shape`` and ``data``
    mirror it as a dimension list and flat buffer.
    """

    __slots__ = ("value", "tape", "index", "requires_grad", "name")

    def __init__(self, value, tape, index, requires_grad, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return list(self.value.shape)

    @property
    def data(self):
        return self.value.ravel()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"


@dataclass
class _Node:
    out: int
    parents: tuple
    vjp: Callable | None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops execute, so inputs always precede outputs.
    """

    nodes: list = field(default_factory=list)
    values: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def _push(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value produced by {name or 'op'}")
        index = len(self.nodes)
        self.nodes.append(_Node(index, tuple(p.index for p in parents), vjp))
        self.values.append(value)
        return Tensor(value, self, index, requires_grad, name)

    def param(self, name: str, value) -> Tensor:
        """Register a differentiable leaf."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = self._push(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self._push(np.array(value, dtype=np.float64))


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ValueError("tensors belong to different tapes")
    return tape


def _record(inputs: Sequence[Tensor], value, vjp, name):
    tape = _same_tape(*inputs)
    rg = any(t.requires_grad for t in inputs)
    return tape._push(value, inputs, vjp if rg else None, rg, name)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# --------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.value.shape, b.value.shape
    return _record((a, b), a.value + b.value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape
    return _record((a, b), a.value - b.value,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _record((a, b), av * bv,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                   "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record((a,), a.value * c, lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _record((a,), y, lambda g: (g * (1.0 - y * y),), "tanh")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.value.shape
    try:
        y = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {list(shape)}") from exc
    return _record((a,), y, lambda g: (g.reshape(old),), "reshape")


def take_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[..., start:stop]``."""
    shape = a.value.shape
    if not 0 <= start < stop <= shape[-1]:
        raise ShapeError(f"take_last: bad slice {start}:{stop} of {shape[-1]}")

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _record((a,), a.value[..., start:stop], vjp, "take_last")


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a @ w`` for ``a`` of shape (..., k) and a 2-D ``w`` of shape (k, m)."""
    av, wv = a.value, w.value
    if wv.ndim != 2 or av.ndim < 1 or av.shape[-1] != wv.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {w.shape}")

    need_a, need_w = a.requires_grad, w.requires_grad

    def vjp(g):
        ga = g @ wv.T if need_a else None
        gw = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if need_w else None
        return ga, gw

    return _record((a, w), av @ wv, vjp, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def mean(a: Tensor, axis: int) -> Tensor:
    shape = a.value.shape
    axis = axis % len(shape)
    n = shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record((a,), a.value.mean(axis=axis), vjp, "mean")


def sum_all(a: Tensor) -> Tensor:
    shape = a.value.shape
    return _record((a,), np.sum(a.value), lambda g: (np.full(shape, float(g)),), "sum")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    xv = x.value
    d = xv.shape[-1]
    if gamma.value.shape != (d,) or beta.value.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.value
    y = xhat * gv + beta.value

    def vjp(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta

    return _record((x, gamma, beta), y, vjp, "layer_norm")


@lru_cache(maxsize=32)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align-corners: output i samples input coordinate i*(n_in-1)/(n_out-1)
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    for i in range(n_out):
        num = i * (n_in - 1)
        lo, rem = divmod(num, n_out - 1)
        frac = rem / (n_out - 1)
        if rem == 0:
            m[i, lo] = 1.0
        else:
            m[i, lo] = 1.0 - frac
            m[i, lo + 1] = frac
    return m


@lru_cache(maxsize=32)
def bilinear_matrix(in_hw: tuple, out_hw: tuple) -> np.ndarray:
    """(out_h*out_w, in_h*in_w) row-major bilinear resampling matrix."""
    m = np.kron(_interp_matrix(in_hw[0], out_hw[0]), _interp_matrix(in_hw[1], out_hw[1]))
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, in_hw: tuple, out_hw: tuple) -> Tensor:
    """Resample a (N, in_h*in_w, C) grid to (N, out_h*out_w, C), align-corners."""
    xv = x.value
    if xv.ndim != 3 or xv.shape[1] != in_hw[0] * in_hw[1]:
        raise ShapeError(f"upsample_bilinear: {x.shape} is not (N, {in_hw[0]}*{in_hw[1]}, C)")
    m = bilinear_matrix(tuple(in_hw), tuple(out_hw))
    mt = m.T
    return _record((x,), np.matmul(m, xv), lambda g: (np.matmul(mt, g),), "upsample")


# --------------------------------------------------------------------------
# losses (all return scalars; weights carry masking and averaging)


def _const(a):
    return np.asarray(a, dtype=np.float64)


def weighted_sq_error(pred: Tensor, target, weights) -> Tensor:
    """``sum(w * (pred - target)**2)``."""
    t, w = _const(target), _const(weights)
    if t.shape != pred.value.shape or w.shape != t.shape:
        raise ShapeError(f"weighted_sq_error: {pred.shape} vs target {list(t.shape)}")
    r = pred.value - t
    return _record((pred,), np.sum(w * r * r), lambda g: (2.0 * float(g) * w * r,), "sq_error")


def mse(pred: Tensor, target) -> Tensor:
    t = _const(target)
    return weighted_sq_error(pred, t, np.full(t.shape, 1.0 / t.size))


def _log_softmax(z):
    zmax = z.max(axis=-1, keepdims=True)
    s = z - zmax
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def weighted_softmax_ce(logits: Tensor, target, weights) -> Tensor:
    """``sum(w * -log softmax(logits)[target])`` over the leading axes.

    ``target`` holds class indices; positions with zero weight may hold any
    integer (e.g. the no-data class) and are ignored.
    """
    z = logits.value
    t = np.asarray(target)
    w = _const(weights)
    if z.shape[:-1] != t.shape or w.shape != t.shape:
        raise ShapeError(f"weighted_softmax_ce: logits {logits.shape} vs target {list(t.shape)}")
    k = z.shape[-1]
    safe = np.where(w != 0, t, 0).astype(np.int64)
    if np.any((safe < 0) | (safe >= k)):
        raise ValueError("weighted_softmax_ce: class index out of range")
    logp = _log_softmax(z)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -np.sum(w * picked)

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (float(g) * w[..., None] * grad,)

    return _record((logits,), loss, vjp, "softmax_ce")


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    t = np.asarray(target)
    return weighted_softmax_ce(logits, t, np.full(t.shape, 1.0 / t.size))


def weighted_bce_with_logits(logits: Tensor, target, weights) -> Tensor:
    x = logits.value
    y, w = _const(target), _const(weights)
    if y.shape != x.shape or w.shape != x.shape:
        raise ShapeError(f"bce_with_logits: {logits.shape} vs target {list(y.shape)}")
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record((logits,), np.sum(w * per), lambda g: (float(g) * w * (sig - y),), "bce")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    y = _const(target)
    return weighted_bce_with_logits(logits, y, np.full(y.shape, 1.0 / y.size))


# --------------------------------------------------------------------------


def forward(graph: Callable, inputs: dict, constants: dict | None = None):
    """Evaluate ``graph`` on a fresh tape.

    ``inputs`` become differentiable leaves, ``constants`` do not. ``graph``
    is called with keyword tensors and must return a Tensor. Returns
    ``(output, tape)``.
    """
    tape = Tape()
    kw = {k: tape.param(k, v) for k, v in inputs.items()}
    for k, v in (constants or {}).items():
        kw[k] = tape.constant(v)
    return graph(**kw), tape


def backward(tape: Tape, root: Tensor, wrt=None) -> dict:
    """Gradient of scalar ``root`` with respect to registered parameters.

    Returns ``{name: ndarray}`` for every parameter in ``wrt`` (default: all);
    parameters that do not influence ``root`` get zeros.
    """
    if root.tape is not tape:
        raise ValueError("root does not belong to this tape")
    if root.value.shape != ():
        raise ValueError(f"tape is not scalar-rooted: root has shape {root.shape}")
    names = list(tape.params) if wrt is None else list(wrt)
    grads = {root.index: np.ones(())}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        if node.vjp is None:
            grads[node.out] = g  # leaf; keep for collection
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None:
                continue
            if p in grads:
                grads[p] = grads[p] + gp
            else:
                grads[p] = gp
    out = {}
    for name in names:
        t = tape.params[name]
        g = grads.get(t.index)
        out[name] = np.zeros_like(t.value) if g is None else np.asarray(g, dtype=np.float64).reshape(t.value.shape)
    return out


def grad_norm(v) -> float:
    """Global Euclidean norm of a flat gradient vector."""
    v = np.asarray(v, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(v, v)))
