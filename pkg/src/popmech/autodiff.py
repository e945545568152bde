"""Reverse-mode differentiation over dense float64 arrays.

Every derivative recipe is itself written with :class:`Tensor` operations, so
running a backward pass with ``create_graph=True`` records new nodes and the
resulting gradients can be differentiated again.  This is what lets a training
loss depend on accelerations that are gradients of a learned energy.

Broadcasting is limited on purpose: binary elementwise ops accept equal shapes,
a 0-d scalar operand, or an operand whose shape equals the trailing shape of
the other (leading-axis broadcast).  Anything else goes through
:func:`broadcast_to` explicitly.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GradError",
    "tensor",
    "constant",
    "no_grad",
    "enable_grad",
    "is_recording",
    "apply",
    "grad",
    "check_grad",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class DomainError(ValueError):
    """Input outside the domain of an op (log/sqrt of negative values)."""


class GradError(RuntimeError):
    """Invalid gradient request."""


_ids = itertools.count()
_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def _recording(flag: bool):
    prev = is_recording()
    _state.recording = flag
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    """Context manager: operations inside do not record parents."""
    return _recording(False)


def enable_grad():
    return _recording(True)


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "id", "op", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = _parents
        self.backward_fn = _backward
        self.requires_grad = bool(requires_grad)
        self.op = _op
        self.id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if self.parents:
            raise GradError("requires_grad_ is only valid on leaf tensors")
        self.requires_grad = flag
        return self

    def __repr__(self) -> str:
        rg = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(op={self.op}, shape={self.shape}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if is_recording() and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, _op=op)
    return Tensor(data, _op=op)


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def _binary_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if a.ndim == 0:
        return sb
    if b.ndim == 0:
        return sa
    if a.ndim > b.ndim and sa[a.ndim - b.ndim:] == sb:
        return sa
    if b.ndim > a.ndim and sb[b.ndim - a.ndim:] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only scalar and leading-axis broadcast are implicit)")


def _reduce_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a gradient back down to an operand that was implicitly broadcast."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return sum_(g)
    lead = g.ndim - len(shape)
    return sum_(g, axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape("add", a, b)

    def bw(out, g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape("sub", a, b)

    def bw(out, g):
        return _reduce_to(g, a.shape), _reduce_to(negate(g), b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape("mul", a, b)

    def bw(out, g):
        ga = _reduce_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _reduce_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape("div", a, b)

    def bw(out, g):
        ga = _reduce_to(div(g, b), a.shape) if a.requires_grad else None
        gb = _reduce_to(negate(mul(g, div(out, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def negate(a) -> Tensor:
    a = constant(a)
    return _make(-a.data, (a,), lambda out, g: (negate(g),), "negate")


def exp(a) -> Tensor:
    a = constant(a)
    return _make(np.exp(a.data), (a,), lambda out, g: (mul(g, out),), "exp")


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.data < 0):
        raise DomainError(f"log: negative input (min {a.data.min():.3e})")
    with np.errstate(divide="ignore"):
        val = np.log(a.data)
    return _make(val, (a,), lambda out, g: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    a = constant(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative input (min {a.data.min():.3e})")
    return _make(np.sqrt(a.data), (a,), lambda out, g: (div(mul(g, 0.5), out),), "sqrt")


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant real exponent ``p``."""
    a = constant(a)
    p = float(p)
    if p == 1.0:
        return a
    if p != int(p) and np.any(a.data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")

    def bw(out, g):
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(np.power(a.data, p), (a,), bw, "power")


def tanh(a) -> Tensor:
    a = constant(a)
    return _make(np.tanh(a.data), (a,), lambda out, g: (mul(g, sub(1.0, mul(out, out))),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = constant(a)
    return _make(_sigmoid_np(a.data), (a,), lambda out, g: (mul(g, mul(out, sub(1.0, out))),), "sigmoid")


def silu(a) -> Tensor:
    a = constant(a)

    def bw(out, g):
        s = sigmoid(a)
        # d/dx x*s(x) = s + x*s*(1-s)
        return (mul(g, add(s, mul(mul(a, s), sub(1.0, s)))),)

    return _make(a.data * _sigmoid_np(a.data), (a,), bw, "silu")


def clamp_min(a, lo: float) -> Tensor:
    """``max(a, lo)``; the gradient is zero where the clamp is active."""
    a = constant(a)
    mask = (a.data > lo).astype(np.float64)

    def bw(out, g):
        return (mul(g, Tensor(mask)),)

    return _make(np.maximum(a.data, lo), (a,), bw, "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keep_shape(shape, axes) -> tuple[int, ...]:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)

    def bw(out, g):
        if not keepdims:
            g = reshape(g, _keep_shape(a.shape, axes))
        return (broadcast_to(g, a.shape),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    """Numpy-style broadcast; the backward pass sums over broadcast axes."""
    a = constant(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        val = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1
    )

    def bw(out, g):
        r = sum_(g, axis=axes, keepdims=True) if axes else g
        return (reshape(r, a.shape),)

    return _make(np.ascontiguousarray(val), (a,), bw, "broadcast")


def reshape(a, shape) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    try:
        val = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    if val.shape == a.shape:
        return a
    return _make(val, (a,), lambda out, g: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = constant(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda out, g: (transpose(g, inv),), "transpose")


def swap_last(a) -> Tensor:
    perm = list(range(a.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return transpose(a, perm)


def matmul(a, b) -> Tensor:
    """Matrix product; both operands ≥2-D with identical leading batch dims."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(out, g):
        ga = matmul(g, swap_last(b)) if a.requires_grad else None
        gb = matmul(swap_last(a), g) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [constant(t) for t in items]
    if not items:
        raise ShapeError("concat: empty input list")
    nd = items[0].ndim
    ax = axis % nd
    for t in items[1:]:
        if t.ndim != nd or any(t.shape[i] != items[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in items]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in items])

    def bw(out, g):
        grads = []
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * nd
            idx[ax] = slice(int(lo), int(hi))
            grads.append(take(g, tuple(idx)) if t.requires_grad else None)
        return tuple(grads)

    return _make(np.concatenate([t.data for t in items], axis=ax), items, bw, "concat")


def take(a, index) -> Tensor:
    """Basic slicing or integer-array row selection (the ``slice`` op)."""
    a = constant(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    try:
        val = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}") from exc

    def bw(out, g):
        return (_scatter(g, index, a.shape),)

    return _make(np.array(val, dtype=np.float64), (a,), bw, "slice")


def _scatter(g: Tensor, index, shape) -> Tensor:
    """Adjoint of :func:`take`: place ``g`` into zeros of ``shape`` at ``index``."""
    buf = np.zeros(shape)
    np.add.at(buf, index, g.data)
    return _make(buf, (g,), lambda out, gg: (take(gg, index),), "scatter")


# ---------------------------------------------------------------------------
# composite-but-primitive ops
# ---------------------------------------------------------------------------

def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Overflow-safe ``log(sum(exp(a), axis))``."""
    a = constant(a)
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    val = np.log(np.sum(np.exp(a.data - m), axis=ax, keepdims=True)) + m
    kshape = val.shape
    if not keepdims:
        val = np.squeeze(val, axis=ax)

    def bw(out, g):
        o = out if keepdims else reshape(out, kshape)
        gk = g if keepdims else reshape(g, kshape)
        sm = exp(sub(a, broadcast_to(o, a.shape)))
        return (mul(broadcast_to(gk, a.shape), sm),)

    return _make(val, (a,), bw, "logsumexp")


def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    ax = axis % a.ndim
    z = a.data - np.max(a.data, axis=ax, keepdims=True)
    e = np.exp(z)
    val = e / np.sum(e, axis=ax, keepdims=True)

    def bw(out, g):
        inner = sum_(mul(g, out), axis=ax, keepdims=True)
        return (mul(out, sub(g, broadcast_to(inner, a.shape))),)

    return _make(val, (a,), bw, "softmax")


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine parameters."""
    a = constant(a)
    mu = broadcast_to(mean(a, axis=-1, keepdims=True), a.shape)
    xc = sub(a, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    out = mul(xc, broadcast_to(inv, a.shape))
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


_APPLY = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "negate": negate,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *xs, axis=0: concat(xs, axis),
    "slice": take,
    "sum": sum_,
    "mean": mean,
    "broadcast": broadcast_to,
    "exp": exp,
    "log": log,
    "power": power,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "silu": silu,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "layer_norm": layer_norm,
    "sqrt": sqrt,
    "clamp_min": clamp_min,
}


def apply(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch an op by name; ``attrs`` are forwarded as keyword arguments."""
    try:
        fn = _APPLY[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_APPLY)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the backward pass is recorded, so the returned
    tensors remain differentiable.
    """
    if output.size != 1:
        raise GradError(f"grad: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not w.requires_grad:
            raise GradError(f"grad: wrt tensor {w!r} does not require grad")
    wrt_ids = {w.id for w in wrt}
    floor = min(wrt_ids) if wrt_ids else 0

    # Ids are creation-ordered, so nothing older than the oldest wrt tensor can
    # depend on it; prune the traversal there.
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen or node.id < floor or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    order = sorted(seen)
    relevant: set[int] = set()
    for nid in order:
        node = seen[nid]
        if nid in wrt_ids or any(p.id in relevant for p in node.parents):
            relevant.add(nid)

    results: dict[int, Tensor] = {}
    if output.id in relevant:
        grads: dict[int, Tensor] = {output.id: Tensor(np.ones_like(output.data))}
        with _recording(create_graph):
            for nid in reversed(order):
                if nid not in relevant or nid not in grads:
                    continue
                node = seen[nid]
                g = grads.pop(nid)
                if nid in wrt_ids:
                    # a wrt tensor may itself depend on another wrt tensor, so keep going
                    results[nid] = g
                if not node.parents:
                    continue
                pgs = node.backward_fn(node, g)
                for p, pg in zip(node.parents, pgs):
                    if pg is None or p.id not in relevant:
                        continue
                    prev = grads.get(p.id)
                    grads[p.id] = pg if prev is None else add(prev, pg)

    out = []
    for w in wrt:
        if w.id in results:
            g = results[w.id]
            out.append(g if create_graph else Tensor(g.data))
        elif allow_unused:
            out.append(Tensor(np.zeros_like(w.data)))
        else:
            raise GradError(f"grad: {w!r} is unreachable from the output (pass allow_unused=True for zeros)")
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def check_grad(
    f: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` to central differences.

    The relative error of component ``i`` is
    ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``; the report holds the maximum.
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    analytic = [g.data.copy() for g in grad(out, leaves, allow_unused=True)]
    # recording stays on so f may take inner gradients; plain leaves record nothing
    numeric = []
    for k, a in enumerate(arrays):
        fd = np.zeros_like(a)
        flat = a.reshape(-1)
        fflat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig - step
            fm = f(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig
            fflat[i] = (fp - fm) / (2.0 * step)
        numeric.append(fd)
    rel, absmax = 0.0, 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        diff = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = max(rel, float(np.max(diff / denom)))
        absmax = max(absmax, float(np.max(diff)))
    return GradCheckReport(rel, absmax, analytic, numeric)


def checkpoint(fn: Callable[..., Sequence[Tensor]], inputs: Sequence[Tensor], params: Sequence[Tensor]) -> list[Tensor]:
    """Run ``fn(*inputs)`` without storing its graph; recompute it on backward.

    ``params`` lists every tensor ``fn`` closes over that needs a gradient.
    Only first-order backward passes through a checkpoint are supported.
    """
    inputs = [constant(x) for x in inputs]
    with no_grad():
        outs = [constant(o) for o in fn(*[Tensor(x.data) for x in inputs])]
    shapes = [o.shape for o in outs]
    sizes = [o.size for o in outs]
    packed = np.concatenate([o.data.reshape(-1) for o in outs])
    parents = tuple(inputs) + tuple(params)

    def bw(out, g):
        if is_recording():
            raise GradError("checkpointed segments support first-order backward only")
        with enable_grad():
            leaves = [Tensor(x.data, requires_grad=True) for x in inputs]
            re = fn(*leaves)
            flat = concat([reshape(o, (-1,)) for o in re])
            s = sum_(mul(flat, Tensor(g.data)))
            want = [t for t in list(leaves) + list(params) if t.requires_grad]
            got = iter(grad(s, want, allow_unused=True)) if s.requires_grad else iter(())
        res = []
        for t in list(leaves) + list(params):
            res.append(next(got, None) if t.requires_grad and s.requires_grad else None)
        return tuple(res)

    node = _make(packed, parents, bw, "checkpoint")
    results, off = [], 0
    for shape, n in zip(shapes, sizes):
        results.append(reshape(take(node, slice(off, off + n)), shape))
        off += n
    return results
