"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every primitive accepts either :class:`Var` (recorded) or plain arrays
(constants).  When no input is a ``Var`` the primitive simply returns the
numpy result, so model code doubles as a fast tape-free evaluator.

Adjoint rules never conjugate, which keeps them valid for complex inputs;
the trainer relies on this for complex-step force-loss gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self._parents: list[tuple] = []
        self._vjps: list[Callable | None] = []
        self.kinds: list[str] = []

    def __len__(self) -> int:
        return len(self._vjps)

    def leaf(self, value) -> "Var":
        return self._push("leaf", np.asarray(value), (), None)

    def _push(self, kind, value, parents, vjp) -> "Var":
        self._parents.append(parents)
        self._vjps.append(vjp)
        self.kinds.append(kind)
        return Var(value, self, len(self._vjps) - 1)


class Var:
    """A recorded array value; ``id`` is its node index on ``tape``."""

    __slots__ = ("value", "tape", "id")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: Tape, id: int):
        self.value = value
        self.tape = tape
        self.id = id

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    dtype = property(lambda self: self.value.dtype)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if np.isscalar(o):
            return scale(self, o)
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


def value(x):
    return x.value if isinstance(x, Var) else x


def _record(kind: str, out: np.ndarray, inputs: Sequence, vjp: Callable):
    """Register ``out`` on the tape shared by ``inputs``.

    ``vjp(g)`` returns one cotangent per input (``None`` allowed for constants).
    """
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError(f"{kind}: inputs recorded on different tapes")
            tape = x.tape
    if tape is None:
        return out
    parents = tuple(x.id if isinstance(x, Var) else None for x in inputs)
    return tape._push(kind, out, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(op, np.shape(a), np.shape(b)) from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b):
    va, vb = value(a), value(b)
    _bshape("add", va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    return _record("add", va + vb, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value(a), value(b)
    _bshape("sub", va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    return _record("sub", va - vb, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a, c: float):
    return _record("scale", value(a) * c, (a,), lambda g: (g * c,))


def mul(a, b):
    va, vb = value(a), value(b)
    _bshape("mul", va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    na, nb = isinstance(a, Var), isinstance(b, Var)
    return _record(
        "mul",
        va * vb,
        (a, b),
        lambda g: (
            _unbroadcast(g * vb, sa) if na else None,
            _unbroadcast(g * va, sb) if nb else None,
        ),
    )


def matmul(a, b):
    va, vb = value(a), value(b)
    try:
        out = va @ vb
    except ValueError:
        raise ShapeError("matmul", np.shape(va), np.shape(vb)) from None
    sa, sb = np.shape(va), np.shape(vb)
    na, nb = isinstance(a, Var), isinstance(b, Var)

    def vjp(g):
        if va.ndim == 1 and vb.ndim == 1:
            return g * vb, g * va
        if vb.ndim == 1:
            return _unbroadcast(g[..., None] * vb, sa), _unbroadcast(
                np.einsum("...i,...ij->...j", g, va), sb
            )
        if va.ndim == 1:
            return _unbroadcast(g @ np.swapaxes(vb, -1, -2), sa), _unbroadcast(
                va[:, None] * g[..., None, :], sb
            )
        ga = _unbroadcast(g @ np.swapaxes(vb, -1, -2), sa) if na else None
        gb = _unbroadcast(np.swapaxes(va, -1, -2) @ g, sb) if nb else None
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def sum_(a, axis=None, keepdims=False):
    va = value(a)
    shape = va.shape
    out = va.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), vjp)


def gather_rows(a, index):
    index = np.asarray(index, dtype=np.intp)
    va = value(a)
    n = va.shape[0]

    def vjp(g):
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _record("gather", va[index], (a,), vjp)


def scatter_add_rows(a, index, n: int):
    """``out[index[e]] += a[e]`` with ``out`` having ``n`` rows."""
    index = np.asarray(index, dtype=np.intp)
    va = value(a)
    if va.shape[0] != index.shape[0]:
        raise ShapeError("scatter_add", va.shape, index.shape)
    out = np.zeros((n,) + va.shape[1:], dtype=va.dtype)
    np.add.at(out, index, va)
    return _record("scatter_add", out, (a,), lambda g: (g[index],))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a):
    va = value(a)
    s = _sigmoid(va)
    return _record("silu", va * s, (a,), lambda g: (g * s * (1.0 + va * (1.0 - s)),))


def exp(a):
    out = np.exp(value(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def sin(a):
    va = value(a)
    return _record("sin", np.sin(va), (a,), lambda g: (g * np.cos(va),))


def cos(a):
    va = value(a)
    return _record("cos", np.cos(va), (a,), lambda g: (-g * np.sin(va),))


def sqrt(a):
    out = np.sqrt(value(a))
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def reciprocal(a):
    out = 1.0 / value(a)
    return _record("reciprocal", out, (a,), lambda g: (-g * out * out,))


def power(a, n: int):
    va = value(a)
    if n == 0:
        return np.ones_like(va)
    return _record("power", va**n, (a,), lambda g: (g * n * va ** (n - 1),))


class _Segments:
    """Precomputed segment sum of coupling entries grouped by one index."""

    def __init__(self, keys: np.ndarray, size: int):
        self.order = np.argsort(keys, kind="stable")
        self.keys, self.starts = np.unique(keys[self.order], return_index=True)
        self.size = size

    def __call__(self, m: np.ndarray) -> np.ndarray:
        out = np.zeros((m.shape[0], self.size), dtype=m.dtype)
        if self.keys.size:
            out[:, self.keys] = np.add.reduceat(m[:, self.order], self.starts, axis=1)
        return out


class Coupling:
    """Constant sparse coupling ``C[a, b, p]`` kept as its nonzero entries."""

    def __init__(self, dense: np.ndarray):
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 3:
            raise ValueError("coupling must be a 3-index array")
        self.shape3 = dense.shape
        A, B, P = dense.shape
        self.ia, self.ib, self.ip = np.nonzero(dense)
        self.coef = dense[self.ia, self.ib, self.ip]
        self.by_p = _Segments(self.ip, P)
        self.by_a = _Segments(self.ia, A)
        self.by_b = _Segments(self.ib, B)

    @property
    def nnz(self) -> int:
        return int(self.coef.size)


def contract(x, y, coupling: Coupling):
    """Bilinear contraction against a constant sparse coupling.

    ``out[..., p] = sum_{a,b} x[..., a] y[..., b] C[a, b, p]``.
    """
    vx, vy = value(x), value(y)
    A, B, P = coupling.shape3
    if vx.shape[:-1] != vy.shape[:-1] or vx.shape[-1] != A or vy.shape[-1] != B:
        raise ShapeError("contract", vx.shape, vy.shape, coupling.shape3)
    lead = vx.shape[:-1]
    fx = vx.reshape(-1, A)
    fy = vy.reshape(-1, B)
    xa = fx[:, coupling.ia]
    yb = fy[:, coupling.ib]
    out = coupling.by_p(xa * yb * coupling.coef).reshape(*lead, P)

    def vjp(g):
        gc = g.reshape(-1, P)[:, coupling.ip] * coupling.coef
        gx = coupling.by_a(gc * yb).reshape(vx.shape)
        gy = coupling.by_b(gc * xa).reshape(vy.shape)
        return gx, gy

    return _record("contract", out, (x, y), vjp)


def concat(items: Sequence, axis: int = -1):
    vals = [value(v) for v in items]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", *(v.shape for v in vals)) from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", out, tuple(items), vjp)


def slice_(a, key):
    va = value(a)
    shape, dtype = va.shape, va.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=np.result_type(dtype, g.dtype))
        out[key] = g
        return (out,)

    return _record("slice", va[key], (a,), vjp)


def reshape(a, shape):
    va = value(a)
    old = va.shape
    return _record("reshape", va.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    va = value(a)
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(va, axes), (a,), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def backward(tape: Tape, root: Var, seed=None) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``root``; returns ``{node id: gradient}``."""
    if not isinstance(root, Var) or root.tape is not tape:
        raise ValueError("root must be a Var recorded on this tape")
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value) if seed is None else np.asarray(seed)}
    for i in range(root.id, -1, -1):
        g = grads.get(i)
        vjp = tape._vjps[i]
        if g is None or vjp is None:
            continue
        for pid, pg in zip(tape._parents[i], vjp(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return grads


def grad(tape: Tape, root: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of ``root`` for each of ``wrt`` (zeros when unreachable).

    A constant ``root`` (one that never touched the tape) has zero gradient.
    """
    if not isinstance(root, Var):
        if np.size(root) != 1:
            raise ValueError(f"grad needs a scalar root, got shape {np.shape(root)}")
        return [np.zeros_like(v.value) for v in wrt]
    grads = backward(tape, root)
    return [grads.get(v.id, np.zeros_like(v.value)) for v in wrt]
