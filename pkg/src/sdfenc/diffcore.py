"""Reverse-mode differentiable array core on numpy.

Values form a DAG through parent links.  Every adjoint rule is itself
expressed with the tracked primitives below, so differentiating through a
gradient (e.g. parameter derivatives of a spatial field gradient) uses the
same single mechanism instead of a dedicated higher-order engine.

Matrix products go through non-optimized ``np.einsum``: unlike BLAS, its
per-row reduction order does not depend on the number of rows, which keeps
batched evaluation bit-identical regardless of chunking.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_ids = itertools.count()

_EINSUM_SPEC = {
    (False, False): "ij,jk->ik",
    (True, False): "ji,jk->ik",
    (False, True): "ij,kj->ik",
    (True, True): "ji,kj->ik",
}


class DiffError(RuntimeError):
    """Raised on contract violations in the differentiable core."""


class Value:
    """A numpy array participating in a differentiable computation graph.

    Leaves are created directly (``Value(data, requires_grad=True)`` for
    trainable tensors, ``requires_grad=False`` for constants); interior nodes
    are created by the primitive ops.  ``grad`` is populated on leaves by
    :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Value, ...] = ()
        self._vjp: Callable[[Value], tuple[Value | None, ...]] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Value(shape={self.shape}{tag})"

    # operator sugar; wraps plain arrays/scalars as constants
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))


def _wrap(x, like: Value) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=like.dtype))


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: Array, parents: Sequence[Value], vjp) -> Value:
    # hot path: ops always hand in float ndarrays, skip Value.__init__ checks
    out = object.__new__(Value)
    out.data = data
    out.grad = None
    rg = False
    for p in parents:
        if p.requires_grad:
            rg = True
            break
    out.requires_grad = rg
    out._parents = tuple(parents) if rg else ()
    out._vjp = vjp if rg else None
    out._id = next(_ids)
    return out


def _const(arr: Array) -> Value:
    return Value(arr)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(cot: Value, shape: tuple[int, ...]) -> Value:
    """Reduce a cotangent from a broadcast shape back to ``shape``."""
    if cot.shape == tuple(shape):
        return cot
    extra = len(cot.shape) - len(shape)
    axes = tuple(range(extra)) + tuple(
        extra + i for i, (c, t) in enumerate(zip(cot.shape[extra:], shape)) if t == 1 and c != 1
    )
    out = reduce_sum(cot, axis=axes) if axes else cot
    return reshape(out, shape)


def add(a: Value, b: Value) -> Value:
    def vjp(cot: Value):
        return (
            _unbroadcast(cot, a.shape) if a.requires_grad else None,
            _unbroadcast(cot, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), vjp)


def sub(a: Value, b: Value) -> Value:
    def vjp(cot: Value):
        return (
            _unbroadcast(cot, a.shape) if a.requires_grad else None,
            _unbroadcast(negate(cot), b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), vjp)


def mul(a: Value, b: Value) -> Value:
    def vjp(cot: Value):
        return (
            _unbroadcast(mul(cot, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(cot, a), b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), vjp)


def negate(a: Value) -> Value:
    def vjp(cot: Value):
        return (negate(cot),)

    return _make(-a.data, (a,), vjp)


def scale(a: Value, c: float) -> Value:
    c = float(c)

    def vjp(cot: Value):
        return (scale(cot, c),)

    return _make(a.data * a.data.dtype.type(c), (a,), vjp)


def matmul(a: Value, b: Value, ta: bool = False, tb: bool = False) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DiffError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    ka = a.shape[0] if ta else a.shape[1]
    kb = b.shape[1] if tb else b.shape[0]
    if ka != kb:
        raise DiffError(f"matmul inner dimensions disagree: {a.shape} (ta={ta}) vs {b.shape} (tb={tb})")
    data = np.einsum(_EINSUM_SPEC[(ta, tb)], a.data, b.data)

    def vjp(cot: Value):
        if a.requires_grad:
            if not ta:
                da = matmul(cot, b) if tb else matmul(cot, b, tb=True)
            else:
                da = matmul(b, cot, ta=tb, tb=True) if tb else matmul(b, cot, tb=True)
        else:
            da = None
        if b.requires_grad:
            if not tb:
                db = matmul(a, cot) if ta else matmul(a, cot, ta=True)
            else:
                db = matmul(cot, a, ta=True, tb=ta)
        else:
            db = None
        return (da, db)

    return _make(data, (a, b), vjp)


def sin(a: Value) -> Value:
    def vjp(cot: Value):
        return (mul(cot, cos(a)),)

    return _make(np.sin(a.data), (a,), vjp)


def cos(a: Value) -> Value:
    def vjp(cot: Value):
        return (negate(mul(cot, sin(a))),)

    return _make(np.cos(a.data), (a,), vjp)


def exp(a: Value) -> Value:
    out = _make(np.exp(a.data), (a,), None)

    def vjp(cot: Value):
        return (mul(cot, out),)

    out._vjp = vjp if out.requires_grad else None
    return out


def relu(a: Value) -> Value:
    # subgradient at 0 is 0
    def vjp(cot: Value):
        mask = _const((a.data > 0).astype(a.dtype))
        return (mul(cot, mask),)

    return _make(np.maximum(a.data, 0), (a,), vjp)


def absolute(a: Value) -> Value:
    # derivative at 0 is 0 (np.sign(0) == 0)
    def vjp(cot: Value):
        return (mul(cot, _const(np.sign(a.data))),)

    return _make(np.abs(a.data), (a,), vjp)


def pow_const(a: Value, p: float) -> Value:
    """a ** p for constant p.  For non-integer p the data must be positive."""
    p = float(p)

    def vjp(cot: Value):
        return (mul(cot, scale(pow_const(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), vjp)


def sqrt(a: Value) -> Value:
    return pow_const(a, 0.5)


def clip(a: Value, lo, hi) -> Value:
    """Clamp; gradient passes only strictly inside the interval."""

    def vjp(cot: Value):
        mask = _const(((a.data > lo) & (a.data < hi)).astype(a.dtype))
        return (mul(cot, mask),)

    return _make(np.clip(a.data, lo, hi), (a,), vjp)


def reshape(a: Value, shape) -> Value:
    shape = tuple(shape)

    def vjp(cot: Value):
        return (reshape(cot, a.shape),)

    return _make(np.reshape(a.data, shape), (a,), vjp)


def broadcast_to(a: Value, shape) -> Value:
    shape = tuple(shape)

    def vjp(cot: Value):
        return (_unbroadcast(cot, a.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = list(values)
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(cot: Value):
        return tuple(
            narrow(cot, axis, int(offsets[i]), sizes[i]) if v.requires_grad else None
            for i, v in enumerate(values)
        )

    return _make(data, values, vjp)


def narrow(a: Value, axis: int, start: int, length: int) -> Value:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    data = np.ascontiguousarray(a.data[tuple(index)])
    before = start
    after = a.shape[axis] - start - length

    def vjp(cot: Value):
        parts = []
        if before:
            shp = list(a.shape)
            shp[axis] = before
            parts.append(_const(np.zeros(shp, dtype=a.dtype)))
        parts.append(cot)
        if after:
            shp = list(a.shape)
            shp[axis] = after
            parts.append(_const(np.zeros(shp, dtype=a.dtype)))
        return (concat(parts, axis=axis) if len(parts) > 1 else cot,)

    return _make(data, (a,), vjp)


def gather_rows(a: Value, idx: Array) -> Value:
    """Select rows of a 2-d value by integer index (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(cot: Value):
        return (scatter_add_rows(cot, idx, a.shape[0]),)

    return _make(a.data[idx], (a,), vjp)


def scatter_add_rows(v: Value, idx: Array, num_rows: int) -> Value:
    """Sum rows of v into ``num_rows`` output slots.

    Accumulation runs sequentially in the order the rows appear (bincount
    per channel, bit-identical to element-wise += in input order), so the
    result is deterministic for a fixed input ordering.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if v.data.ndim == 2 and v.dtype == np.float64:
        data = np.empty((num_rows, v.shape[1]), dtype=np.float64)
        for c in range(v.shape[1]):
            data[:, c] = np.bincount(idx, weights=v.data[:, c], minlength=num_rows)
    else:
        data = np.zeros((num_rows,) + v.shape[1:], dtype=v.dtype)
        np.add.at(data, idx, v.data)

    def vjp(cot: Value):
        return (gather_rows(cot, idx),)

    return _make(data, (v,), vjp)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Value, axis=None) -> Value:
    axes = _norm_axes(axis, a.data.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(cot: Value):
        return (broadcast_to(reshape(cot, kept), a.shape),)

    return _make(np.sum(a.data, axis=axes), (a,), vjp)


def reduce_mean(a: Value, axis=None) -> Value:
    axes = _norm_axes(axis, a.data.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(reduce_sum(a, axis=axes), 1.0 / n)


def reduce_max(a: Value, axis=None) -> Value:
    """Max reduction; the gradient routes to the argmax (ties: lowest index)."""
    if a.size == 0:
        raise DiffError("max reduction over an empty value")
    if axis is None:
        flat = reshape(a, (a.size,))
        return reduce_max(flat, axis=0)
    axis = axis % a.data.ndim
    data = np.max(a.data, axis=axis)
    am = np.argmax(a.data, axis=axis)  # first occurrence = lowest index
    mask = np.zeros(a.shape, dtype=a.dtype)
    np.put_along_axis(mask, np.expand_dims(am, axis), 1.0, axis)
    kept = tuple(1 if i == axis else s for i, s in enumerate(a.shape))

    def vjp(cot: Value):
        return (mul(reshape(cot, kept), _const(mask)),)

    return _make(data, (a,), vjp)


# ---------------------------------------------------------------------------
# spec-level surface


def linear(x: Value, weight: Value, bias: Value | None = None) -> Value:
    """Row-wise affine map x @ weight + bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DiffError(
            f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}"
        )
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DiffError(
                f"linear: bias shape {bias.shape} incompatible with weight shape {weight.shape}"
            )
        out = add(out, bias)
    return out


_ELEMENTWISE = {
    "sin": sin,
    "relu": relu,
    "exp": exp,
    "abs": absolute,
    "negate": negate,
}


def elementwise(op: str, x: Value, factor: float | None = None) -> Value:
    if op == "scale":
        if factor is None:
            raise DiffError("elementwise('scale', ...) needs a factor")
        return scale(x, factor)
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DiffError(f"unknown elementwise op {op!r}") from None
    return fn(x)


def reduce(op: str, x: Value, axis=None) -> Value:
    if op == "sum":
        return reduce_sum(x, axis)
    if op == "mean":
        return reduce_mean(x, axis)
    if op == "max":
        return reduce_max(x, axis)
    raise DiffError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# differentiation engine


def _ancestors(root: Value) -> list[Value]:
    """Grad-requiring nodes reachable from root, newest first."""
    seen = {root._id}
    stack = [root]
    nodes = []
    while stack:
        v = stack.pop()
        nodes.append(v)
        for p in v._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    nodes.sort(key=lambda v: -v._id)
    return nodes


def _backprop(root: Value, seed: Value, keep: set[int]) -> dict[int, Value]:
    """Propagate cotangents from root; returns {id: cotangent} for leaves
    and for explicitly kept node ids.  Cotangents are tracked Values, so the
    result stays differentiable."""
    if not root.requires_grad:
        return {}
    cot: dict[int, Value] = {root._id: seed}
    for node in _ancestors(root):
        c = cot.get(node._id)
        if c is None:
            continue
        if node._vjp is None:
            continue  # leaf: keep its entry
        for p, pc in zip(node._parents, node._vjp(c)):
            if pc is None or not p.requires_grad:
                continue
            prev = cot.get(p._id)
            cot[p._id] = pc if prev is None else add(prev, pc)
        if node._id not in keep:
            del cot[node._id]
    return cot


def grad(output: Value, wrt: Sequence[Value], seed: Value | None = None) -> list[Value]:
    """Cotangents of ``output`` w.r.t. the given nodes, as tracked Values.

    Missing dependencies yield zeros.  The default seed requires a scalar
    output (any single-element shape).
    """
    if seed is None:
        if output.size != 1:
            raise DiffError(f"grad of non-scalar output (shape {output.shape}) needs a seed")
        seed = _const(np.ones(output.shape, dtype=output.dtype))
    cot = _backprop(output, seed, keep={w._id for w in wrt})
    out = []
    for w in wrt:
        g = cot.get(w._id)
        out.append(g if g is not None else _const(np.zeros(w.shape, dtype=w.dtype)))
    return out


def backward(loss: Value) -> None:
    """Populate ``grad`` on every tracked leaf the loss depends on.

    Erroring on already-populated grads forces an explicit reset
    (ParamStore.zero_grad) between steps.
    """
    if loss.size != 1:
        raise DiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DiffError("backward on a value with no tracked dependencies")
    seed = _const(np.ones(loss.shape, dtype=loss.dtype))
    cot = _backprop(loss, seed, keep=set())
    leaves = [n for n in _ancestors(loss) if n._vjp is None]
    for leaf in leaves:
        if leaf._id not in cot:
            continue
        if leaf.grad is not None:
            raise DiffError("backward called twice without resetting gradients")
    for leaf in leaves:
        c = cot.get(leaf._id)
        if c is not None:
            leaf.grad = np.array(c.data, copy=True)


def spatial_gradient(field: Callable[[Value], Value], x) -> Value:
    """Per-sample gradient of a scalar field at positions x (s, 3).

    The result is a tracked Value: it stays differentiable w.r.t. every
    parameter the field depends on (the adjoint pass is built from tracked
    primitives).
    """
    x = as_value(x)
    if x.data.ndim != 2:
        raise DiffError(f"spatial_gradient expects (s, d) positions, got {x.shape}")
    leaf = Value(np.array(x.data, copy=True), requires_grad=True)
    y = field(leaf)
    if y.shape not in ((x.shape[0],), (x.shape[0], 1)):
        raise DiffError(
            f"field must be scalar per sample: got output shape {y.shape} for {x.shape[0]} samples"
        )
    (g,) = grad(reduce_sum(y), [leaf])
    return g


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named trainable tensors with a stable iteration order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Value] = {}

    def add(self, name: str, data) -> Value:
        if name in self._params:
            raise DiffError(f"duplicate parameter name {name!r}")
        v = Value(np.array(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Value]]:
        return self._params.items()

    def values(self) -> Iterable[Value]:
        return self._params.values()

    @property
    def total_count(self) -> int:
        return sum(v.size for v in self._params.values())

    def count_by_prefix(self) -> dict[str, int]:
        """Element counts grouped by the first dotted name component."""
        out: dict[str, int] = {}
        for name, v in self._params.items():
            key = name.split(".", 1)[0]
            out[key] = out.get(key, 0) + v.size
        return out

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.grad = None

    def gradients(self) -> dict[str, Array]:
        return {n: v.grad for n, v in self._params.items()}

    def state_dict(self) -> dict[str, Array]:
        return {n: np.array(v.data, copy=True) for n, v in self._params.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise DiffError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, v in self._params.items():
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != v.shape:
                raise DiffError(f"shape mismatch for tensor {name!r}: {arr.shape} vs {v.shape}")
            v.data = np.array(arr, copy=True)
