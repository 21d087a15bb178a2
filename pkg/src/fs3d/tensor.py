"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive records a :class:`Node` whose vector-Jacobian product is
written in terms of other primitives. Running :func:`grad` with
``create_graph=True`` therefore records the backward pass itself, which is
what second-order (force-matching) training needs.

All reductions use fixed sequential orders (``np.add.accumulate``,
``np.add.at`` and input-order ``np.bincount``) and matmuls with a short contraction use a row-invariant
kernel, so a row of any output depends only on the matching input rows.
The sharded runtime relies on this to reproduce single-rank results bit for
bit.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Node", "Primitive", "tensor", "constant", "zeros",
    "grad", "gradcheck", "no_grad", "count_ops", "op_scope", "deterministic",
    "PrecisionError", "ShapeError", "NonFiniteError",
]

# contraction lengths above this go to BLAS (only used for cross-row products)
ROW_INVARIANT_MAX_K = 256


class PrecisionError(TypeError):
    pass


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.recording = True
        self.counters: list[Counter] = []
        self.scopes: list[str] = []
        self.deterministic = True


_state = _State()
_seq = itertools.count()


def _current_tape() -> "Tape | None":
    return _state.tapes[-1] if _state.tapes else None


@contextlib.contextmanager
def no_grad():
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextlib.contextmanager
def deterministic(flag: bool = True):
    """Toggle fixed-order kernels; off switches sums and matmuls to BLAS/pairwise."""
    prev = _state.deterministic
    _state.deterministic = bool(flag)
    try:
        yield
    finally:
        _state.deterministic = prev


def is_deterministic() -> bool:
    return _state.deterministic


@contextlib.contextmanager
def count_ops():
    """Count scalar multiplies issued by primitives inside the block.

    Yields a Counter with a ``"total"`` key plus one key per active
    :func:`op_scope` name.
    """
    c: Counter = Counter()
    _state.counters.append(c)
    try:
        yield c
    finally:
        _state.counters.remove(c)


@contextlib.contextmanager
def op_scope(name: str):
    _state.scopes.append(name)
    try:
        yield
    finally:
        _state.scopes.pop()


def _count(n: int):
    if not _state.counters or n == 0:
        return
    for c in _state.counters:
        c["total"] += n
        for s in set(_state.scopes):
            c[s] += n


class Tape:
    """Ordered record of nodes created while the tape is active.

    The tape fixes the scalar precision of everything built under it;
    ``mark`` stores positions so a caller can slice the record into phases.
    """

    def __init__(self, dtype="float32"):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise PrecisionError(f"unsupported precision {self.dtype}")
        self.nodes: list[Node] = []
        self.marks: dict[str, int] = {}

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.remove(self)

    def mark(self, name: str) -> int:
        self.marks[name] = len(self.nodes)
        return self.marks[name]

    def span(self, start: str, stop: str | None = None) -> list["Node"]:
        lo = self.marks[start]
        hi = self.marks[stop] if stop is not None else len(self.nodes)
        return self.nodes[lo:hi]

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward and return the outputs in tape order."""
        values: dict[int, np.ndarray] = {}
        outs = []
        with no_grad():
            for node in self.nodes:
                arrays = [values.get(id(t), t.data) for t in node.inputs]
                out = node.op.forward(*arrays, **node.attrs)
                values[id(node.out)] = out
                outs.append(out)
        return outs


@dataclass(eq=False)
class Node:
    op: "Primitive"
    inputs: tuple
    attrs: dict
    out: "Tensor | None" = None
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "owners", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, owners=None, name=None):
        self.data = data
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.owners = owners
        self.name = name

    # -- array-like conveniences
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, owners=self.owners)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad}{tag})"

    # -- operators
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, p): return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _resolve_dtype(dtype):
    tape = _current_tape()
    if dtype is None:
        return tape.dtype if tape is not None else np.dtype(np.float32)
    dtype = np.dtype(dtype)
    if tape is not None and dtype != tape.dtype:
        raise PrecisionError(f"tape precision is {tape.dtype}, got {dtype}")
    return dtype


def tensor(data, requires_grad=False, dtype=None, owners=None, name=None) -> Tensor:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is None and _current_tape() is None and arr.dtype.kind == "f":
        dtype = arr.dtype
    arr = np.array(arr, dtype=_resolve_dtype(dtype))
    return Tensor(arr, requires_grad=requires_grad, owners=owners, name=name)


def constant(data, dtype=None, owners=None) -> Tensor:
    return tensor(data, requires_grad=False, dtype=dtype, owners=owners)


def zeros(shape, dtype=None, owners=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_resolve_dtype(dtype)), owners=owners)


# ---------------------------------------------------------------------------
# deterministic kernels

def seq_sum(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    """Sum with a strictly left-to-right accumulation order."""
    if not _state.deterministic:
        return np.asarray(np.sum(x, axis=axis, keepdims=keepdims), dtype=x.dtype)
    if axis is None:
        flat = x.reshape(-1)
        if flat.size == 0:
            out = np.zeros((), dtype=x.dtype)
        else:
            out = np.add.accumulate(flat)[-1]
        out = np.asarray(out, dtype=x.dtype)
        return out.reshape((1,) * x.ndim) if keepdims else out
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        return np.zeros(x.shape[:axis] + ((1,) if keepdims else ()) + x.shape[axis + 1:], dtype=x.dtype)
    acc = np.add.accumulate(x, axis=axis)
    out = np.take(acc, [-1] if keepdims else -1, axis=axis)
    return np.ascontiguousarray(out)


def row_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` where each output row depends only on the same row of ``a``."""
    m, k = a.shape
    n = b.shape[1]
    if k > ROW_INVARIANT_MAX_K or not _state.deterministic:
        return a @ b
    out = np.zeros((m, n), dtype=a.dtype)
    if m == 0 or n == 0:
        return out
    tmp = np.empty((m, n), dtype=a.dtype)
    for j in range(k):
        np.multiply(a[:, j:j + 1], b[j:j + 1, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


# ---------------------------------------------------------------------------
# primitives


class Primitive:
    """A differentiable operation.

    ``forward(*arrays, **attrs) -> array``; ``vjp(node, g, want) -> tuple``
    with one entry per input (a Tensor, or None where ``want`` is false). ``seg_vjp(node, g, i, inverse, n)``
    optionally returns per-owner partial gradients for a parameter input.
    ``seg_pass(node, parts)`` maps stacked per-owner partials of the output of
    a parameter-only op (transpose, reshape) to partials of its input.
    """

    def __init__(self, name, forward, vjp, mults=None, seg_vjp=None, owners_fn=None, seg_pass=None):
        self.name = name
        self.forward = forward
        self.vjp = vjp
        self.mults = mults
        self.seg_vjp = seg_vjp
        self.owners_fn = owners_fn
        self.seg_pass = seg_pass

    def __repr__(self):
        return f"<primitive {self.name}>"

    def __call__(self, *inputs, owners=None, **attrs):
        for t in inputs:
            if t.data is None:
                raise StaleDataError(f"{self.name}: input data has been released")
        dtype = inputs[0].dtype
        for t in inputs:
            if t.dtype != dtype:
                raise PrecisionError(f"{self.name}: mixed precisions {dtype} and {t.dtype}")
        tape = _current_tape()
        if tape is not None and dtype != tape.dtype:
            raise PrecisionError(f"{self.name}: tape is {tape.dtype}, input is {dtype}")
        arrays = [t.data for t in inputs]
        out = self.forward(*arrays, **attrs)
        if out.dtype != dtype:
            out = out.astype(dtype)
        if self.mults is not None:
            _count(self.mults(arrays, out, attrs))
        if owners is None and self.owners_fn is not None:
            owners = self.owners_fn(inputs, attrs)
        elif owners is None:
            for t in inputs:
                if t.owners is not None and t.ndim and out.ndim and t.shape[0] == out.shape[0]:
                    owners = t.owners
                    break
        res = Tensor(out, owners=owners)
        if _state.recording and any(t.requires_grad for t in inputs):
            res.requires_grad = True
            node = Node(self, tuple(inputs), attrs, res)
            res.node = node
            if tape is not None:
                tape.nodes.append(node)
        return res


class StaleDataError(RuntimeError):
    """Raised when an op reads a tensor whose storage was released (re-sharded)."""


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _check_same(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ (use expand)")


def _binary(prim):
    def call(a, b):
        if not isinstance(a, Tensor):
            a = _lift(a, b)
        if not isinstance(b, Tensor):
            b = _lift(b, a)
        _check_same(prim.name, a, b)
        return prim(a, b)
    call.__name__ = prim.name
    return call


def _n(arrays, out, attrs):
    return out.size


_add = Primitive("add", lambda a, b: a + b, lambda n, g, w: (g, g))
_sub = Primitive("sub", lambda a, b: a - b, lambda n, g, w: (g, neg(g)))
_mul = Primitive(
    "mul", lambda a, b: a * b,
    lambda n, g, w: (g * n.inputs[1], g * n.inputs[0]), mults=_n)
_div = Primitive(
    "div", lambda a, b: a / b,
    lambda n, g, w: (g / n.inputs[1], neg(g * n.out) / n.inputs[1]))

add = _binary(_add)
sub = _binary(_sub)
mul = _binary(_mul)
div = _binary(_div)

neg = Primitive("neg", lambda a: -a, lambda n, g, w: (neg(g),))
abs_ = Primitive("abs", np.abs, lambda n, g, w: (g * Tensor(np.sign(n.inputs[0].data)),))
exp = Primitive("exp", np.exp, lambda n, g, w: (g * n.out,))
log = Primitive("log", np.log, lambda n, g, w: (g / n.inputs[0],))


def _pow_fwd(a, p):
    if p == 2:
        return a * a
    if p == 1:
        return a.copy()
    return np.power(a, a.dtype.type(p))


def _pow_vjp(n, g, want):
    p = n.attrs["p"]
    x = n.inputs[0]
    if p == 1:
        return (g,)
    if p == 2:
        return (g * (x * 2.0),)
    return (g * (power(x, p - 1) * float(p)),)


_pow = Primitive("pow", _pow_fwd, _pow_vjp, mults=_n)


def power(x: Tensor, p: float) -> Tensor:
    return _pow(x, p=p)


def sqrt(x: Tensor) -> Tensor:
    return _pow(x, p=0.5)


def _sigmoid_fwd(a):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


sigmoid = Primitive("sigmoid", _sigmoid_fwd, lambda n, g, w: (g * (n.out * (1.0 - n.out)),), mults=_n)


def silu(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def _clamp_fwd(a, lo, hi):
    return np.clip(a, lo, hi)


def _clamp_vjp(n, g, want):
    x = n.inputs[0].data
    mask = ((x >= n.attrs["lo"]) & (x <= n.attrs["hi"])).astype(x.dtype)
    return (g * Tensor(mask),)


clamp = Primitive("clamp", _clamp_fwd, _clamp_vjp)


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return row_matmul(a, b)


def _matmul_vjp(n, g, want):
    a, b = n.inputs
    ga = matmul(g, transpose(b)) if want[0] else None
    gb = matmul(transpose(a), g) if want[1] else None
    return ga, gb


def _group(owners: np.ndarray):
    uniq, inverse = np.unique(owners, return_inverse=True)
    return uniq, inverse.reshape(-1)


def _matmul_seg(n, g, i, inverse, n_groups):
    if i != 1:
        raise ValueError("segmented gradient only for the right operand of matmul")
    a = n.inputs[0].data
    out = np.zeros((n_groups, a.shape[1], g.shape[1]), dtype=a.dtype)
    np.add.at(out, inverse, a[:, :, None] * g.data[:, None, :])
    return out


matmul = Primitive(
    "matmul", _matmul_fwd, _matmul_vjp,
    mults=lambda arrays, out, attrs: arrays[0].shape[0] * arrays[0].shape[1] * arrays[1].shape[1],
    seg_vjp=_matmul_seg)

transpose = Primitive("transpose", lambda a: np.ascontiguousarray(a.T), lambda n, g, w: (transpose(g),),
                      owners_fn=lambda inputs, attrs: None,
                      seg_pass=lambda n, parts: np.ascontiguousarray(np.swapaxes(parts, 1, 2)))


def _sum_fwd(a, axis, keepdims):
    return seq_sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(n, g, want):
    x = n.inputs[0]
    axis, keepdims = n.attrs["axis"], n.attrs["keepdims"]
    if axis is None:
        kept = (1,) * x.ndim
    else:
        ax = axis % x.ndim
        kept = x.shape[:ax] + (1,) + x.shape[ax + 1:]
    if not keepdims:
        g = reshape(g, kept)
    return (expand(g, x.shape),)


_sum = Primitive("sum", _sum_fwd, _sum_vjp)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    return _sum(x, axis=axis, keepdims=keepdims)


def _expand_fwd(a, shape):
    return np.ascontiguousarray(np.broadcast_to(a, shape))


def _reduce_axes(src_shape, dst_shape):
    lead = len(dst_shape) - len(src_shape)
    axes = list(range(lead))
    for k, s in enumerate(src_shape):
        if s == 1 and dst_shape[lead + k] != 1:
            axes.append(lead + k)
    return lead, axes


def sum_to(g: Tensor, shape) -> Tensor:
    """Reduce ``g`` to ``shape`` by summing broadcast axes (inverse of expand)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead, axes = _reduce_axes(shape, g.shape)
    for ax in sorted(axes, reverse=True):
        g = sum_(g, axis=ax, keepdims=ax >= lead)
    return reshape(g, shape)


def _expand_vjp(n, g, want):
    return (sum_to(g, n.inputs[0].shape),)


def _expand_seg(n, g, i, inverse, n_groups):
    src_shape = n.inputs[0].shape
    gd = g.data
    inner = gd.shape[1:]
    if tuple(src_shape) == tuple(inner):
        rows = gd
    elif tuple(src_shape) == (1,) + tuple(inner):
        rows = gd[:, None]
    else:
        raise ValueError(f"segmented expand from {src_shape} to {gd.shape} not supported")
    out = np.zeros((n_groups,) + tuple(src_shape), dtype=gd.dtype)
    np.add.at(out, inverse, rows)
    return out


_expand = Primitive("expand", _expand_fwd, _expand_vjp, seg_vjp=_expand_seg)


def expand(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return _expand(x, shape=shape)


def _reshape_vjp(n, g, want):
    return (reshape(g, n.inputs[0].shape),)


_reshape = Primitive("reshape", lambda a, shape: a.reshape(shape), _reshape_vjp,
                     seg_pass=lambda n, parts: parts.reshape((len(parts),) + n.inputs[0].shape))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return _reshape(x, shape=shape)


def _gather_fwd(a, idx):
    return np.take(a, idx, axis=0)


def _gather_vjp(n, g, want):
    return (scatter_add(g, n.attrs["idx"], n.inputs[0].shape[0], owners=n.inputs[0].owners),)


def _gather_seg(n, g, i, inverse, n_groups):
    src = n.inputs[0]
    out = np.zeros((n_groups,) + src.shape, dtype=g.dtype)
    np.add.at(out, (inverse, n.attrs["idx"]), g.data)
    return out


def _no_owners(inputs, attrs):
    return None


_gather = Primitive("gather", _gather_fwd, _gather_vjp, seg_vjp=_gather_seg, owners_fn=_no_owners)


def gather(x: Tensor, idx, owners=None) -> Tensor:
    """Rows ``x[idx]`` (axis 0)."""
    idx = np.asarray(idx, dtype=np.int64)
    return _gather(x, idx=idx, owners=owners)


def _scatter_fwd(a, idx, n):
    if a.dtype == np.float64 or not is_deterministic():
        # bincount adds in input order in binary64, matching add.at bitwise for binary64 input
        d = int(np.prod(a.shape[1:], dtype=np.int64))
        key = (idx[:, None] * d + np.arange(d)).reshape(-1)
        out = np.bincount(key, weights=a.reshape(-1), minlength=n * d)
        return out.astype(a.dtype, copy=False).reshape((n,) + a.shape[1:])
    out = np.zeros((n,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, idx, a)
    return out


def _scatter_vjp(n, g, want):
    return (gather(g, n.attrs["idx"], owners=n.inputs[0].owners),)


_scatter = Primitive("scatter_add", _scatter_fwd, _scatter_vjp, owners_fn=_no_owners)


def scatter_add(x: Tensor, idx, n: int, owners=None) -> Tensor:
    """Sum rows of ``x`` into ``n`` rows by ``idx``, in ascending row order of ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_add: {idx.shape[0]} indices for {x.shape[0]} rows")
    return _scatter(x, idx=idx, n=int(n), owners=owners)


def _concat_fwd(*arrays, axis):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(n, g, want):
    axis = n.attrs["axis"]
    out, start = [], 0
    for t in n.inputs:
        stop = start + t.shape[axis]
        out.append(slice_(g, start, stop, axis=axis))
        start = stop
    return tuple(out)


def _concat_owners(inputs, attrs):
    if attrs["axis"] != 0:
        return inputs[0].owners
    if any(t.owners is None for t in inputs):
        return None
    return np.concatenate([t.owners for t in inputs])


_concat = Primitive("concat", _concat_fwd, _concat_vjp, owners_fn=_concat_owners)


def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    xs = list(xs)
    if len(xs) == 1:
        return xs[0]
    return _concat(*xs, axis=axis)


def _slice_fwd(a, start, stop, axis):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    return np.ascontiguousarray(a[tuple(sl)])


def _slice_vjp(n, g, want):
    a = n.inputs[0]
    return (pad(g, n.attrs["start"], a.shape[n.attrs["axis"]], axis=n.attrs["axis"]),)


def _slice_owners(inputs, attrs):
    o = inputs[0].owners
    if o is None or attrs["axis"] != 0:
        return o
    return o[attrs["start"]:attrs["stop"]]


_slice = Primitive("slice", _slice_fwd, _slice_vjp, owners_fn=_slice_owners)


def slice_(x: Tensor, start: int, stop: int, axis=0) -> Tensor:
    axis = axis % x.ndim
    return _slice(x, start=int(start), stop=int(stop), axis=axis)


def _pad_fwd(a, start, total, axis):
    shape = list(a.shape)
    shape[axis] = total
    out = np.zeros(shape, dtype=a.dtype)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + a.shape[axis])
    out[tuple(sl)] = a
    return out


def _pad_vjp(n, g, want):
    a = n.inputs[0]
    ax = n.attrs["axis"]
    return (slice_(g, n.attrs["start"], n.attrs["start"] + a.shape[ax], axis=ax),)


def _pad_owners(inputs, attrs):
    return inputs[0].owners if attrs["axis"] != 0 else None


_pad = Primitive("pad", _pad_fwd, _pad_vjp, owners_fn=_pad_owners)


def pad(x: Tensor, start: int, total: int, axis=0) -> Tensor:
    """Embed ``x`` at ``start`` inside zeros of extent ``total`` along ``axis``."""
    return _pad(x, start=int(start), total=int(total), axis=axis % x.ndim)


def _softmax_fwd(a):
    shift = np.max(a, axis=-1, keepdims=True) if a.shape[-1] else 0.0
    e = np.exp(a - shift)
    return e / seq_sum(e, axis=-1, keepdims=True)


def _softmax_vjp(n, g, want):
    y = n.out
    inner = sum_(g * y, axis=-1, keepdims=True)
    return (y * (g - expand(inner, y.shape)),)


softmax = Primitive("softmax", _softmax_fwd, _softmax_vjp, mults=_n)


# composites ------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = y + expand(b, y.shape)
    return y


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product, returned with shape (rows, 1)."""
    return sum_(a * b, axis=-1, keepdims=True)


def layer_norm(x: Tensor, eps=1e-5) -> Tensor:
    d = x.shape[-1]
    mean = sum_(x, axis=-1, keepdims=True) * (1.0 / d)
    xc = x - expand(mean, x.shape)
    var = sum_(xc * xc, axis=-1, keepdims=True) * (1.0 / d)
    inv = power(var + eps, -0.5)
    return xc * expand(inv, x.shape)


def segment_sum(x: Tensor, seg, n: int, owners=None) -> Tensor:
    return scatter_add(x, seg, n, owners=owners)


# ---------------------------------------------------------------------------
# backward


def _ancestors(roots: Iterable[Tensor]) -> list[Node]:
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [t for t in roots if t.node is not None]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for p in node.inputs:
            if p.node is not None and id(p.node) not in seen:
                stack.append(p)
    nodes.sort(key=lambda nd: nd.seq)
    return nodes


@dataclass
class SegmentedGrad:
    """Gradient of a parameter kept as one partial per owner id."""

    shape: tuple
    dtype: np.dtype
    parts: dict = field(default_factory=dict)

    def add(self, owner_ids: np.ndarray, partials: np.ndarray):
        for k, o in enumerate(owner_ids.tolist()):
            cur = self.parts.get(o)
            if cur is None:
                cur = np.zeros(self.shape, dtype=self.dtype)
            self.parts[o] = cur + partials[k]

    def fold(self) -> np.ndarray:
        """Sum the partials in ascending owner order."""
        out = np.zeros(self.shape, dtype=self.dtype)
        for o in sorted(self.parts):
            out = out + self.parts[o]
        return out


def grad(y: Tensor, xs: Sequence[Tensor], create_graph=False, seed: Tensor | None = None,
         segmented: Sequence[Tensor] = (), return_flags=False):
    """Gradients of ``y`` with respect to each tensor in ``xs``.

    ``seed`` is the incoming cotangent (required when ``y`` is not scalar).
    Tensors listed in ``segmented`` receive a :class:`SegmentedGrad` keyed by
    the row owners of the consuming op; this is only valid for leaves and
    with ``create_graph=False``. Unreachable inputs get an exact zero.
    """
    xs = list(xs)
    seg_ids = {id(t) for t in segmented}
    leaf_seg = set(seg_ids)
    if seg_ids and create_graph:
        raise ValueError("segmented gradients cannot be recorded")
    if seed is None:
        if y.data.size != 1:
            raise ShapeError(f"backward from non-scalar of shape {y.shape} needs a seed")
        seed = Tensor(np.ones(y.shape, dtype=y.dtype))
    if seed.shape != y.shape:
        raise ShapeError("seed shape does not match output")

    target_ids = {id(x) for x in xs}
    nodes = _ancestors([y])
    relevant: set[int] = set(target_ids)
    for nd in nodes:
        if any(id(p) in relevant for p in nd.inputs):
            relevant.add(id(nd.out))
    # outputs of parameter-only ops keep segmented cotangents as well
    passing = set()
    if seg_ids:
        for nd in nodes:
            rg = [p for p in nd.inputs if p.requires_grad]
            if nd.op.seg_pass is not None and nd.out.owners is None and rg \
                    and all(id(p) in seg_ids for p in rg):
                seg_ids.add(id(nd.out))
                passing.add(id(nd))
    row_owners: dict[int, np.ndarray] = {}

    grads: dict[int, Tensor] = {}
    seg_out: dict[int, SegmentedGrad] = {}
    final: dict[int, Tensor] = {}

    def accumulate(t: Tensor, g: Tensor):
        k = id(t)
        cur = grads.get(k)
        grads[k] = g if cur is None else add(cur, g)

    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        if id(y) in relevant:
            accumulate(y, seed)
        for nd in reversed(nodes):
            k = id(nd.out)
            if k not in relevant:
                continue
            if id(nd) in passing:
                sg = seg_out.get(k)
                if sg is not None and sg.parts:
                    uniq = np.array(sorted(sg.parts), dtype=np.int64)
                    parts = nd.op.seg_pass(nd, np.stack([sg.parts[o] for o in uniq.tolist()]))
                    p = nd.inputs[0]
                    seg_out.setdefault(id(p), SegmentedGrad(p.shape, p.dtype)).add(uniq, parts)
                continue
            g = grads.pop(k, None)
            if k in target_ids and g is not None:
                final[k] = g
            if g is None:
                continue
            want = [id(p) in relevant for p in nd.inputs]
            if not any(want):
                continue
            if seg_ids and nd.out.owners is not None:
                for p in nd.inputs:
                    if p.owners is None and p.ndim and p.shape[0] == nd.out.shape[0]:
                        row_owners.setdefault(id(p), nd.out.owners)
            seg_inputs = [i for i, p in enumerate(nd.inputs) if id(p) in seg_ids and want[i]]
            plain_want = [w and i not in seg_inputs for i, w in enumerate(want)]
            plain = nd.op.vjp(nd, g, plain_want) if any(plain_want) else None
            for i, p in enumerate(nd.inputs):
                if not want[i]:
                    continue
                if i in seg_inputs:
                    if nd.op.seg_vjp is None:
                        raise ValueError(f"{nd.op.name} cannot produce segmented gradients")
                    owners = nd.out.owners
                    if owners is None:
                        owners = row_owners.get(k)
                    if owners is None:
                        raise ValueError(f"{nd.op.name}: segmented gradient needs row owners")
                    uniq, inverse = _group(owners)
                    parts = nd.op.seg_vjp(nd, g, i, inverse, len(uniq))
                    sg = seg_out.setdefault(id(p), SegmentedGrad(p.shape, p.dtype))
                    sg.add(uniq, parts)
                    continue
                gi = plain[i]
                if gi is None:
                    continue
                if gi.shape != p.shape:
                    raise ShapeError(f"{nd.op.name}: vjp shape {gi.shape} for input {p.shape}")
                accumulate(p, gi)
        for x in xs:
            k = id(x)
            if k in grads and k not in final:
                final[k] = grads[k]

    out, flags = [], []
    for x in xs:
        if id(x) in leaf_seg:
            out.append(seg_out.get(id(x), SegmentedGrad(x.shape, x.dtype)))
            flags.append(id(x) not in seg_out)
            continue
        g = final.get(id(x))
        flags.append(g is None)
        out.append(g if g is not None else Tensor(np.zeros(x.shape, dtype=x.dtype)))
    return (out, flags) if return_flags else out


# ---------------------------------------------------------------------------
# finite-difference check


def gradcheck(f: Callable[[Tensor], Tensor], x: np.ndarray, h=1e-5, floor=1e-12,
              components=None, stencil=2) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` and
    central differences, ``|a - n| / max(|a|, |n|, floor)``.

    ``components`` restricts the check to selected flat indices. ``stencil``
    is 2 for (f(x+h)-f(x-h))/2h or 4 for the fourth-order formula.
    """
    x = np.array(x)
    xt = Tensor(x.copy(), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ShapeError("gradcheck needs a scalar function")
    (g,) = grad(y, [xt])
    analytic = g.data.reshape(-1).astype(np.float64)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("non-finite analytic gradient")

    def value(v):
        with no_grad():
            out = f(Tensor(v)).item()
        if not np.isfinite(out):
            raise NonFiniteError("non-finite function value")
        return out

    flat = x.reshape(-1)
    idx = range(flat.size) if components is None else components
    worst = 0.0
    for i in idx:
        def shifted(d):
            v = flat.copy()
            v[i] = v[i] + d
            return value(v.reshape(x.shape))
        if stencil == 2:
            num = (shifted(h) - shifted(-h)) / (2 * h)
        else:
            num = (8 * (shifted(h) - shifted(-h)) - (shifted(2 * h) - shifted(-2 * h))) / (12 * h)
        a = analytic[i]
        denom = max(abs(a), abs(num), floor)
        worst = max(worst, abs(a - num) / denom)
    return worst
