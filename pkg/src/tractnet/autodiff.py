"""Reverse-mode automatic differentiation on a flat tape of dense matrices.

Every value is a 2-D float64 array.  Column vectors are ``(n, 1)``; a batch of
inputs is stored column-wise as ``(n, N)``.  The only broadcast supported is a
``(n, 1)`` bias added to every column of an ``(n, N)`` matrix inside
:func:`affine` and :func:`add`.

Example::

    tape = Tape()
    w = tape.leaf([[2.0]])
    x = tape.const([[3.0]])
    y = square(matmul(w, x))
    (gw,) = gradient(tape, sum_(y), [w])   # [[36.]]
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tape",
    "Var",
    "affine",
    "matmul",
    "add",
    "sub",
    "scale",
    "mul",
    "square",
    "relu",
    "abs_",
    "tanh",
    "maximum",
    "minimum",
    "pos",
    "neg",
    "sum_",
    "mean",
    "detach",
    "transpose",
    "concat",
    "gradient",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible operand shapes {', '.join(map(str, shapes))}")


# A record is (input ids, vjp).  vjp maps the output adjoint to a tuple of
# input adjoints (None where the input receives nothing).
_Record = tuple[tuple[int, ...], Callable[[np.ndarray], tuple] | None]


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._records: list[_Record] = []
        self._leaf: list[bool] = []

    def __len__(self) -> int:
        return len(self._values)

    def _push(self, value: np.ndarray, inputs: tuple[int, ...], vjp, leaf: bool = False) -> "Var":
        value.setflags(write=False)
        self._values.append(value)
        self._records.append((inputs, vjp))
        self._leaf.append(leaf)
        return Var(self, len(self._values) - 1)

    def leaf(self, value) -> "Var":
        """Differentiable input (a parameter)."""
        return self._push(_as2d(value, copy=True), (), None, leaf=True)

    def const(self, value) -> "Var":
        """Input that is never differentiated."""
        return self._push(_as2d(value, copy=True), (), None)

    def value(self, node: int) -> np.ndarray:
        return self._values[node]

    def is_leaf(self, node: int) -> bool:
        return self._leaf[node]


class Var:
    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, node: int):
        self.tape = tape
        self.id = node

    @property
    def value(self) -> np.ndarray:
        return self.tape.value(self.id)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    def __radd__(self, other):
        return add(_lift(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(self.tape, other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _lift(self.tape, other))

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"


def _as2d(value, copy: bool = False) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=copy)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError("const", arr.shape)
    return arr


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    if np.isscalar(x):
        return tape.const([[float(x)]])
    return tape.const(x)


def _tape_of(*vs: Var) -> Tape:
    tape = vs[0].tape
    for v in vs[1:]:
        if v.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    # (n, 1) operand broadcast across columns
    return g.sum(axis=1, keepdims=True)


def _check_bias(op: str, a: tuple, b: tuple) -> tuple[int, int]:
    if a == b:
        return a
    if b[1] == 1 and a[0] == b[0]:
        return a
    if a[1] == 1 and a[0] == b[0]:
        return b
    raise ShapeError(op, a, b)


# ---------------------------------------------------------------- primitives


def matmul(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    A, B = a.value, b.value
    if A.shape[1] != B.shape[0]:
        raise ShapeError("matmul", A.shape, B.shape)
    return tape._push(A @ B, (a.id, b.id), lambda g: (g @ B.T, A.T @ g))


def affine(W: Var, x: Var, b: Var) -> Var:
    """``W @ x + b`` with ``b`` an ``(n, 1)`` column broadcast over columns of x."""
    tape = _tape_of(W, x, b)
    Wv, xv, bv = W.value, x.value, b.value
    if Wv.shape[1] != xv.shape[0] or bv.shape != (Wv.shape[0], 1):
        raise ShapeError("affine", Wv.shape, xv.shape, bv.shape)
    out = Wv @ xv + bv
    return tape._push(
        out,
        (W.id, x.id, b.id),
        lambda g: (g @ xv.T, Wv.T @ g, g.sum(axis=1, keepdims=True)),
    )


def add(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    sa, sb = a.shape, b.shape
    _check_bias("add", sa, sb)
    return tape._push(a.value + b.value, (a.id, b.id), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b: Var) -> Var:
    tape = _tape_of(a, b)
    sa, sb = a.shape, b.shape
    _check_bias("sub", sa, sb)
    return tape._push(a.value - b.value, (a.id, b.id), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape._push(c * a.value, (a.id,), lambda g: (c * g,))


def mul(a: Var, b: Var) -> Var:
    """Elementwise product."""
    tape = _tape_of(a, b)
    A, B = a.value, b.value
    if A.shape != B.shape:
        raise ShapeError("mul", A.shape, B.shape)
    return tape._push(A * B, (a.id, b.id), lambda g: (g * B, g * A))


def square(a: Var) -> Var:
    A = a.value
    return a.tape._push(A * A, (a.id,), lambda g: (2.0 * A * g,))


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    return a.tape._push(np.where(mask, a.value, 0.0), (a.id,), lambda g: (g * mask,))


def pos(a: Var) -> Var:
    """``[v]^+ = max(v, 0)``; same rule as :func:`relu`."""
    mask = a.value > 0.0
    return a.tape._push(np.where(mask, a.value, 0.0), (a.id,), lambda g: (g * mask,))


def neg(a: Var) -> Var:
    """``[v]^- = min(v, 0)``; subgradient 0 at v = 0."""
    mask = a.value < 0.0
    return a.tape._push(np.where(mask, a.value, 0.0), (a.id,), lambda g: (g * mask,))


def abs_(a: Var) -> Var:
    sgn = np.sign(a.value)
    return a.tape._push(np.abs(a.value), (a.id,), lambda g: (g * sgn,))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return a.tape._push(t, (a.id,), lambda g: (g * (1.0 - t * t),))


def _minmax(op: str, a: Var, b: Var, pick_a: np.ndarray, out: np.ndarray) -> Var:
    tape = _tape_of(a, b)
    tie = a.value == b.value
    wa = np.where(tie, 0.5, pick_a.astype(np.float64))
    wb = 1.0 - wa
    return tape._push(out, (a.id, b.id), lambda g: (g * wa, g * wb))


def maximum(a: Var, b: Var) -> Var:
    """Elementwise max; ties split the adjoint 0.5/0.5."""
    if a.shape != b.shape:
        raise ShapeError("maximum", a.shape, b.shape)
    return _minmax("maximum", a, b, a.value > b.value, np.maximum(a.value, b.value))


def minimum(a: Var, b: Var) -> Var:
    """Elementwise min; ties split the adjoint 0.5/0.5."""
    if a.shape != b.shape:
        raise ShapeError("minimum", a.shape, b.shape)
    return _minmax("minimum", a, b, a.value < b.value, np.minimum(a.value, b.value))


def sum_(a: Var) -> Var:
    shape = a.shape
    return a.tape._push(np.array([[a.value.sum()]]), (a.id,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Var) -> Var:
    shape = a.shape
    n = a.value.size
    return a.tape._push(np.array([[a.value.mean()]]), (a.id,), lambda g: (np.full(shape, g[0, 0] / n),))


def transpose(a: Var) -> Var:
    return a.tape._push(a.value.T.copy(), (a.id,), lambda g: (g.T,))


def concat(vs: Sequence[Var]) -> Var:
    """Stack Vars with equal column counts on top of each other."""
    if not vs:
        raise ValueError("concat of nothing")
    tape = _tape_of(*vs)
    cols = {v.shape[1] for v in vs}
    if len(cols) != 1:
        raise ShapeError("concat", *(v.shape for v in vs))
    cuts = np.cumsum([v.shape[0] for v in vs])[:-1]
    return tape._push(
        np.concatenate([v.value for v in vs], axis=0),
        tuple(v.id for v in vs),
        lambda g: tuple(np.split(g, cuts, axis=0)),
    )


def detach(a: Var) -> Var:
    """Stop-gradient: same forward value, no backward contribution."""
    return a.tape._push(a.value, (a.id,), None)


# ------------------------------------------------------------------ backward


def gradient(tape: Tape, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Subgradients of a 1x1 ``output`` with respect to leaf Vars ``wrt``."""
    if output.tape is not tape:
        raise ValueError("output is not on this tape")
    if output.shape != (1, 1):
        raise ShapeError("gradient", output.shape)
    for v in wrt:
        if v.tape is not tape or not tape.is_leaf(v.id):
            raise ValueError(f"gradient target {v!r} is not a leaf of this tape")

    adj: list[np.ndarray | None] = [None] * (output.id + 1)
    adj[output.id] = np.ones((1, 1))
    records = tape._records
    for node in range(output.id, -1, -1):
        g = adj[node]
        if g is None:
            continue
        inputs, vjp = records[node]
        if vjp is None:
            continue
        for i, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            adj[i] = gi if adj[i] is None else adj[i] + gi

    out = []
    for v in wrt:
        g = adj[v.id] if v.id < len(adj) else None
        out.append(np.zeros(v.shape) if g is None else np.array(g))
    return out
