"""Reverse-mode differentiation over float64 matrices.

A :class:`Tape` records primitive operations in execution order.  Every
:class:`Value` is a 2-D array (scalars are 1x1) plus the handle of the node
that produced it; constants carry no handle and never receive adjoints.

Only scalar-vs-matrix broadcasting is supported.  Row broadcasts such as a
bias add are written as ``ones @ bias`` so shape mistakes fail loudly.

Non-smooth primitives (``abs``, ``relu``, ``clip`` and data-dependent
``gather``) use 0 as the subgradient at their kink and record the branch they
took.  Two tapes built from the same program share a branch signature exactly
when every non-smooth primitive took the same branch, which is what
:func:`check_gradient` uses to reject points that sit on a kink.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from doicr.errors import ContractError, NonSmoothPointError, NumericError

__all__ = [
    "Tape",
    "Value",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "absolute",
    "sigmoid",
    "relu",
    "clip",
    "square",
    "total",
    "mean",
    "gather",
    "transpose",
    "rows",
    "reshape",
    "check_gradient",
]

SIGMOID_LIMIT = 500.0
FD_NOISE_ULPS = 64.0


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ContractError(f"values must be at most 2-D, got shape {arr.shape}")
    return arr


class Value:
    """A matrix on a tape.  ``node`` is ``None`` for constants."""

    __slots__ = ("tape", "data", "node")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", data: np.ndarray, node: int | None):
        self.tape = tape
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 value, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        kind = "const" if self.node is None else f"node={self.node}"
        return f"Value({kind}, shape={self.data.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Single-owner record of primitive operations in topological order."""

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.values: list[np.ndarray] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._vjps: list[VJP | None] = []
        self._params: dict[str, int] = {}
        self._branches: list[tuple[str, bytes]] = []
        self.adjoints: list[np.ndarray | None] = []

    def __len__(self) -> int:
        return len(self.ops)

    # -- leaves -----------------------------------------------------------
    def param(self, data, name: str | None = None) -> Value:
        """Register a differentiable leaf."""
        arr = _as_matrix(data)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite parameter value")
        if name is None:
            name = f"p{len(self._params)}"
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        node = self._push("param", arr, (), None)
        self._params[name] = node
        return Value(self, arr, node)

    def const(self, data) -> Value:
        arr = _as_matrix(data)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite constant")
        return Value(self, arr, None)

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    # -- recording --------------------------------------------------------
    def _push(self, op, out, parents, vjp) -> int:
        self.ops.append(op)
        self.values.append(out)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return len(self.ops) - 1

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Value], vjp: VJP) -> Value:
        # the sum is non-finite whenever any entry is; recheck only on overflow
        with np.errstate(over="ignore", invalid="ignore"):
            total_ = out.sum()
        if not math.isfinite(total_) and not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite output from {op}")
        parents = tuple(v.node for v in inputs)
        if all(p is None for p in parents):
            return Value(self, out, None)
        return Value(self, out, self._push(op, out, parents, vjp))

    def note_branch(self, op: str, pattern: np.ndarray) -> None:
        self._branches.append((op, np.ascontiguousarray(pattern).tobytes()))

    def branch_signature(self) -> tuple[tuple[str, bytes], ...]:
        return tuple(self._branches)

    # -- reverse pass -----------------------------------------------------
    def backward(self, output: Value) -> dict[str, np.ndarray]:
        """Return d(output)/d(param) for every registered parameter.

        Adjoints are accumulated in a fixed reverse order so the result is
        bit-reproducible for an identical tape.
        """
        if output.tape is not self:
            raise ContractError("output belongs to a different tape")
        if output.data.shape != (1, 1):
            raise ContractError(f"backward needs a scalar output, got {output.data.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.ops)
        if output.node is not None:
            adj[output.node] = np.ones((1, 1))
            for i in range(output.node, -1, -1):
                g = adj[i]
                vjp = self._vjps[i]
                if g is None or vjp is None:
                    continue
                for parent, pg in zip(self._parents[i], vjp(g)):
                    if parent is None or pg is None:
                        continue
                    adj[parent] = pg if adj[parent] is None else adj[parent] + pg
        self.adjoints = adj
        grads = {}
        for name, node in self._params.items():
            g = adj[node]
            grads[name] = np.zeros_like(self.values[node]) if g is None else g
        return grads


# ---------------------------------------------------------------------------
# primitives


def _lift(a, b) -> tuple[Value, Value]:
    if isinstance(a, Value):
        tape = a.tape
    elif isinstance(b, Value):
        tape = b.tape
    else:
        raise ContractError("at least one operand must be a Value")
    if not isinstance(a, Value):
        a = tape.const(a)
    if not isinstance(b, Value):
        b = tape.const(b)
    if a.tape is not b.tape:
        raise ContractError("operands recorded on different tapes")
    return a, b


def _check_elementwise(op: str, a: Value, b: Value) -> None:
    if a.shape != b.shape and a.shape != (1, 1) and b.shape != (1, 1):
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array([[g.sum()]])


def matmul(a, b) -> Value:
    a, b = _lift(a, b)
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = A @ B
    return a.tape.record("matmul", out, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Value:
    a, b = _lift(a, b)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Value:
    a, b = _lift(a, b)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Value:
    a, b = _lift(a, b)
    _check_elementwise("mul", a, b)
    A, B = a.data, b.data
    return a.tape.record(
        "mul",
        A * B,
        (a, b),
        lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)),
    )


def div(a, b) -> Value:
    a, b = _lift(a, b)
    _check_elementwise("div", a, b)
    A, B = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = A / B

    def vjp(g):
        return _unbroadcast(g / B, A.shape), _unbroadcast(-g * A / (B * B), B.shape)

    return a.tape.record("div", out, (a, b), vjp)


def neg(a: Value) -> Value:
    return a.tape.record("neg", -a.data, (a,), lambda g: (-g,))


def scale(c: float, a: Value) -> Value:
    """Multiply a matrix by a plain (non-differentiable) scalar."""
    c = float(c)
    return a.tape.record("scale", c * a.data, (a,), lambda g: (c * g,))


def exp(a: Value) -> Value:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return a.tape.record("exp", out, (a,), lambda g: (g * out,))


def absolute(a: Value) -> Value:
    sign = np.sign(a.data)
    a.tape.note_branch("abs", sign.astype(np.int8))
    return a.tape.record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def sigmoid(a: Value) -> Value:
    x = np.clip(a.data, -SIGMOID_LIMIT, SIGMOID_LIMIT)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a.tape.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Value) -> Value:
    mask = a.data > 0
    a.tape.note_branch("relu", mask)
    return a.tape.record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a: Value, lo: float, hi: float) -> Value:
    inside = (a.data > lo) & (a.data < hi)
    a.tape.note_branch("clip", np.sign(np.clip(a.data, lo, hi) - a.data).astype(np.int8))
    return a.tape.record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def square(a: Value) -> Value:
    A = a.data
    return a.tape.record("square", A * A, (a,), lambda g: (2.0 * g * A,))


def _sequential_sum(arr: np.ndarray) -> float:
    # cumsum accumulates strictly left to right, unlike pairwise np.sum
    return float(np.cumsum(arr.ravel())[-1])


def total(a: Value) -> Value:
    """Sum of all entries, accumulated left to right in row-major order."""
    shape = a.shape
    s = _sequential_sum(a.data)
    return a.tape.record("sum", np.array([[s]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Value) -> Value:
    n = a.data.size
    shape = a.shape
    s = _sequential_sum(a.data)
    return a.tape.record(
        "mean", np.array([[s / n]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),)
    )


def gather(a: Value, index: int) -> Value:
    """Select one entry (row-major flat ``index``) as a 1x1 value.

    The full adjoint flows to the selected entry; all others receive 0.
    """
    size = a.data.size
    if not 0 <= index < size:
        raise ContractError(f"gather index {index} out of range for {size} entries")
    shape = a.shape
    a.tape.note_branch("gather", np.array([index], dtype=np.int64))

    def vjp(g):
        out = np.zeros(shape)
        out.flat[index] = g[0, 0]
        return (out,)

    return a.tape.record("gather", np.array([[a.data.flat[index]]]), (a,), vjp)


def rows(a: Value, start: int, stop: int) -> Value:
    """Contiguous row slice ``a[start:stop]``."""
    if not 0 <= start < stop <= a.shape[0]:
        raise ContractError(f"row slice {start}:{stop} out of range for {a.shape}")
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return a.tape.record("rows", a.data[start:stop].copy(), (a,), vjp)


def reshape(a: Value, shape: tuple[int, int]) -> Value:
    """Row-major reshape."""
    old = a.shape
    if int(np.prod(shape)) != a.data.size:
        raise ContractError(f"cannot reshape {old} to {shape}")
    return a.tape.record("reshape", a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def transpose(a: Value) -> Value:
    return a.tape.record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# gradient checking

ScalarProgram = Callable[[Tape, Value], Value]


def _evaluate(fn: ScalarProgram, x: np.ndarray):
    tape = Tape()
    leaf = tape.param(x.reshape(-1, 1), name="x")
    out = fn(tape, leaf)
    if out.data.shape != (1, 1):
        raise ContractError("gradient check needs a scalar-valued program")
    value = out.item()
    if not np.isfinite(value):
        raise NumericError("non-finite function value in gradient check")
    return tape, out, value


def check_gradient(fn: ScalarProgram, point, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients with central differences.

    ``fn(tape, x)`` must build a scalar on ``tape`` from the column vector
    ``x``.  Returns ``max |a - c| / (|a| + |c| + 1e-12)`` over coordinates,
    counting as exact any coordinate where both slopes are below the
    difference quotient's rounding floor ``64 * eps_mach * |f| / step``.

    Raises
    ------
    NonSmoothPointError
        If any perturbed evaluation takes a different branch through a
        non-smooth primitive than the base point does.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x = np.asarray(point, dtype=np.float64).ravel().copy()
    tape, out, f0 = _evaluate(fn, x)
    analytic = tape.backward(out)["x"].ravel()
    signature = tape.branch_signature()
    numeric = np.empty_like(x)
    scale_f = abs(f0)
    for j in range(x.size):
        vals = []
        for sgn in (1.0, -1.0):
            xp = x.copy()
            xp[j] += sgn * step
            t, _, v = _evaluate(fn, xp)
            if t.branch_signature() != signature:
                raise NonSmoothPointError(
                    f"coordinate {j} crosses a kink within step {step:g}"
                )
            vals.append(v)
            scale_f = max(scale_f, abs(v))
        numeric[j] = (vals[0] - vals[1]) / (2.0 * step)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    # A central difference cannot resolve slopes below its rounding noise;
    # coordinates where both estimates sit under that floor agree.
    floor = FD_NOISE_ULPS * np.finfo(np.float64).eps * max(scale_f, 1e-300) / step
    rel[(np.abs(analytic) <= floor) & (np.abs(numeric) <= floor)] = 0.0
    return float(rel.max()) if rel.size else 0.0
