"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations eagerly (forward values computed at record
time) in topological order; ``backward`` replays the recording in reverse
and accumulates chain-rule adjoints. Tensors are plain numpy float64
arrays; scalars use shape ``()``.

Broadcasting is limited to three documented cases: identical shapes,
scalar ``()`` against anything, and a ``(D,)`` row vector against an
``(N, D)`` matrix. Anything else raises ``ShapeMismatch``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NotScalar, ShapeMismatch

Tensor = np.ndarray

LEAKY_SLOPE = 0.01  # matches the lrelu activation used throughout the nets

_ELEMENTWISE = {"add", "sub", "mul", "div"}


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb:
        return True
    if sa == () or sb == ():
        return True
    # (N, D) against (D,)
    if len(sa) == 2 and sb == (sa[1],):
        return True
    if len(sb) == 2 and sa == (sb[1],):
        return True
    return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # row vector broadcast over axis 0
    if len(grad.shape) == 2 and shape == (grad.shape[1],):
        return grad.sum(axis=0)
    raise ShapeMismatch(f"cannot reduce gradient {grad.shape} to {shape}")


class Var:
    """Handle to a live node on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple:
        return self.tape.values[self.idx].shape

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ShapeMismatch("operands live on different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


class Tape:
    """Append-only operation record; single writer, replayable."""

    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple] = []
        self.aux: list = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.ops)

    def _append(self, op: str, inputs: tuple, aux, value: np.ndarray) -> Var:
        self.ops.append(op)
        self.inputs.append(inputs)
        self.aux.append(aux)
        self.values.append(value)
        return Var(self, len(self.ops) - 1)

    def leaf(self, value) -> Var:
        return self._append("leaf", (), None, _as_array(value))

    # constants are leaves whose gradient the caller ignores
    const = leaf

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's forward value from the recording.

        Leaves keep their stored value. Used to assert that the tape is a
        faithful, deterministic record of the computation.
        """
        out: list[np.ndarray] = []
        for i, op in enumerate(self.ops):
            if op == "leaf":
                out.append(self.values[i])
                continue
            vals = tuple(out[j] for j in self.inputs[i])
            out.append(_FORWARD[op](vals, self.aux[i]))
        return out


def _record(tape: Tape, op: str, inputs: tuple, aux, value) -> Var:
    return tape._append(op, inputs, aux, value)


# --- forward implementations (shared by record and replay) ---

def _fw_add(v, aux):
    return v[0] + v[1]


def _fw_sub(v, aux):
    return v[0] - v[1]


def _fw_mul(v, aux):
    return v[0] * v[1]


def _fw_div(v, aux):
    return v[0] / v[1]


def _fw_matmul(v, aux):
    return v[0] @ v[1]


def _fw_sin(v, aux):
    return np.sin(v[0])


def _fw_cos(v, aux):
    return np.cos(v[0])


def _fw_sqrt(v, aux):
    return np.sqrt(v[0])


def _fw_neg(v, aux):
    return -v[0]


def _fw_sum(v, aux):
    return np.asarray(v[0].sum(axis=aux))


def _fw_mean(v, aux):
    return np.asarray(v[0].mean(axis=aux))


def _fw_concat(v, aux):
    return np.concatenate(v, axis=aux)


def _fw_slice(v, aux):
    axis, start, stop = aux
    idx = [slice(None)] * v[0].ndim
    idx[axis] = slice(start, stop)
    return v[0][tuple(idx)]


def _fw_reshape(v, aux):
    return v[0].reshape(aux)


def _fw_relu(v, aux):
    return np.maximum(v[0], 0.0)


def _fw_leaky_relu(v, aux):
    return np.where(v[0] > 0.0, v[0], LEAKY_SLOPE * v[0])


def _fw_tanh(v, aux):
    return np.tanh(v[0])


def _fw_square(v, aux):
    return v[0] * v[0]


def _fw_custom(v, aux):
    return aux[0](*v)


_FORWARD = {
    "custom": _fw_custom,
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "matmul": _fw_matmul,
    "sin": _fw_sin,
    "cos": _fw_cos,
    "sqrt": _fw_sqrt,
    "neg": _fw_neg,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "reshape": _fw_reshape,
    "relu": _fw_relu,
    "leaky_relu": _fw_leaky_relu,
    "tanh": _fw_tanh,
    "square": _fw_square,
}


# --- public op constructors ---

def _binary(op: str, a: Var, b: Var) -> Var:
    if a.tape is not b.tape:
        raise ShapeMismatch("operands live on different tapes")
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape}")
    val = _FORWARD[op]((a.value, b.value), None)
    return _record(a.tape, op, (a.idx, b.idx), None, val)


def add(a: Var, b: Var) -> Var:
    return _binary("add", a, b)


def sub(a: Var, b: Var) -> Var:
    return _binary("sub", a, b)


def mul(a: Var, b: Var) -> Var:
    return _binary("mul", a, b)


def div(a: Var, b: Var) -> Var:
    return _binary("div", a, b)


def matmul(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    ok = (
        (len(sa) == 2 and len(sb) == 2 and sa[1] == sb[0])
        or (len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0])
        or (len(sa) == 1 and len(sb) == 2 and sa[0] == sb[0])
    )
    if not ok:
        raise ShapeMismatch(f"matmul: shapes {sa} and {sb}")
    return _record(a.tape, "matmul", (a.idx, b.idx), None, a.value @ b.value)


def _unary(op: str, a: Var) -> Var:
    return _record(a.tape, op, (a.idx,), None, _FORWARD[op]((a.value,), None))


def sin(a: Var) -> Var:
    return _unary("sin", a)


def cos(a: Var) -> Var:
    return _unary("cos", a)


def sqrt(a: Var) -> Var:
    return _unary("sqrt", a)


def neg(a: Var) -> Var:
    return _unary("neg", a)


def relu(a: Var) -> Var:
    return _unary("relu", a)


def leaky_relu(a: Var) -> Var:
    return _unary("leaky_relu", a)


def tanh(a: Var) -> Var:
    return _unary("tanh", a)


def square(a: Var) -> Var:
    return _unary("square", a)


def sum_(a: Var, axis: int | None = None) -> Var:
    if axis not in (None, 0):
        raise ShapeMismatch("sum supports axis None or 0")
    return _record(a.tape, "sum", (a.idx,), axis, _fw_sum((a.value,), axis))


def mean(a: Var, axis: int | None = None) -> Var:
    if axis not in (None, 0):
        raise ShapeMismatch("mean supports axis None or 0")
    if a.value.size == 0 or (axis == 0 and a.shape[0] == 0):
        raise ShapeMismatch("mean of empty tensor")
    return _record(a.tape, "mean", (a.idx,), axis, _fw_mean((a.value,), axis))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    if not parts:
        raise ShapeMismatch("concat needs at least one input")
    tape = parts[0].tape
    nd = parts[0].value.ndim
    if axis >= nd:
        raise ShapeMismatch(f"concat axis {axis} out of range for ndim {nd}")
    for p in parts:
        if p.tape is not tape:
            raise ShapeMismatch("operands live on different tapes")
        if p.value.ndim != nd:
            raise ShapeMismatch("concat inputs must share rank")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeMismatch("concat inputs disagree off-axis")
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = tuple(p.shape[axis] for p in parts)
    return _record(tape, "concat", tuple(p.idx for p in parts), (axis, sizes), val)


def slice_(a: Var, axis: int, start: int, stop: int) -> Var:
    if axis >= a.value.ndim or not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeMismatch(f"slice [{start}:{stop}] axis {axis} of {a.shape}")
    return _record(a.tape, "slice", (a.idx,), (axis, start, stop),
                   _fw_slice((a.value,), (axis, start, stop)))


def reshape(a: Var, shape: tuple) -> Var:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}")
    return _record(a.tape, "reshape", (a.idx,), shape, a.value.reshape(shape))


def custom(inputs: Sequence[Var], forward_fn, backward_fn) -> Var:
    """Record a fused operation with a hand-derived backward rule.

    ``forward_fn(*values) -> value``; ``backward_fn(values, out, grad) ->
    per-input gradients``. Used for accelerated twins of composite ops
    whose gradients are validated against the primitive recordings.
    """
    tape = inputs[0].tape
    vals = tuple(v.value for v in inputs)
    return _record(tape, "custom", tuple(v.idx for v in inputs),
                   (forward_fn, backward_fn), forward_fn(*vals))


# --- reverse pass ---

def backward(loss: Var) -> dict[int, np.ndarray]:
    """Adjoints of ``loss`` with respect to every tape node.

    Returns a map node id -> gradient array. Nodes that do not influence
    the loss get an all-zero gradient.
    """
    if loss.shape != ():
        raise NotScalar(f"loss has shape {loss.shape}")
    tape = loss.tape
    values = tape.values
    n = loss.idx + 1
    grads: list[np.ndarray | None] = [None] * len(tape.ops)
    grads[loss.idx] = np.asarray(1.0)

    def acc(i: int, g):
        # callers hand over gradients already reduced to values[i].shape;
        # accumulation always rebinds, so aliasing an upstream grad is fine
        if grads[i] is None:
            grads[i] = g
        else:
            grads[i] = grads[i] + g

    for i in range(n - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        op = tape.ops[i]
        if op == "leaf":
            continue
        ins = tape.inputs[i]
        aux = tape.aux[i]
        if op == "add":
            acc(ins[0], _unbroadcast(g, values[ins[0]].shape))
            acc(ins[1], _unbroadcast(g, values[ins[1]].shape))
        elif op == "sub":
            acc(ins[0], _unbroadcast(g, values[ins[0]].shape))
            acc(ins[1], _unbroadcast(-g, values[ins[1]].shape))
        elif op == "mul":
            av, bv = values[ins[0]], values[ins[1]]
            acc(ins[0], _unbroadcast(g * bv, av.shape))
            acc(ins[1], _unbroadcast(g * av, bv.shape))
        elif op == "div":
            av, bv = values[ins[0]], values[ins[1]]
            acc(ins[0], _unbroadcast(g / bv, av.shape))
            acc(ins[1], _unbroadcast(-g * av / (bv * bv), bv.shape))
        elif op == "matmul":
            av, bv = values[ins[0]], values[ins[1]]
            if av.ndim == 2 and bv.ndim == 2:
                acc(ins[0], g @ bv.T)
                acc(ins[1], av.T @ g)
            elif av.ndim == 2 and bv.ndim == 1:
                acc(ins[0], np.outer(g, bv))
                acc(ins[1], av.T @ g)
            else:  # (k,) @ (k, n)
                acc(ins[0], bv @ g)
                acc(ins[1], np.outer(av, g))
        elif op == "sin":
            acc(ins[0], g * np.cos(values[ins[0]]))
        elif op == "cos":
            acc(ins[0], -g * np.sin(values[ins[0]]))
        elif op == "sqrt":
            acc(ins[0], g * 0.5 / values[i])
        elif op == "neg":
            acc(ins[0], -g)
        elif op == "sum":
            # axis None or 0: broadcasting g back matches both reductions
            acc(ins[0], np.broadcast_to(g, values[ins[0]].shape))
        elif op == "mean":
            src = values[ins[0]]
            count = src.size if aux is None else src.shape[0]
            acc(ins[0], np.broadcast_to(g / count, src.shape))
        elif op == "concat":
            axis, sizes = aux
            off = 0
            for j, sz in zip(ins, sizes):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(off, off + sz)
                acc(j, g[tuple(idx)])
                off += sz
        elif op == "slice":
            axis, start, stop = aux
            full = np.zeros_like(values[ins[0]])
            idx = [slice(None)] * full.ndim
            idx[axis] = slice(start, stop)
            full[tuple(idx)] = g
            acc(ins[0], full)
        elif op == "reshape":
            acc(ins[0], g.reshape(values[ins[0]].shape))
        elif op == "relu":
            acc(ins[0], g * (values[ins[0]] > 0.0))
        elif op == "leaky_relu":
            av = values[ins[0]]
            acc(ins[0], g * np.where(av > 0.0, 1.0, LEAKY_SLOPE))
        elif op == "tanh":
            acc(ins[0], g * (1.0 - values[i] * values[i]))
        elif op == "square":
            acc(ins[0], g * 2.0 * values[ins[0]])
        elif op == "custom":
            input_vals = tuple(values[j] for j in ins)
            for j, gj in zip(ins, aux[1](input_vals, values[i], g)):
                if gj is not None:
                    acc(j, gj)
        else:
            raise ShapeMismatch(f"unknown op {op}")

    out: dict[int, np.ndarray] = {}
    for i in range(len(tape.ops)):
        out[i] = grads[i] if grads[i] is not None else np.zeros_like(values[i])
    return out


def check_gradient(f: Callable[[Var], Var], x: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must build a scalar Var from the single leaf it is handed and be
    deterministic. The per-coordinate error is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x = _as_array(x)
    tape = Tape()
    vx = tape.leaf(x)
    out = f(vx)
    analytic = backward(out)[vx.idx]

    numeric = np.zeros_like(x)
    flat = numeric.reshape(-1)
    base = x.copy().reshape(-1)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + eps
        hi = f(Tape().leaf(base.reshape(x.shape))).value
        base[i] = orig - eps
        lo = f(Tape().leaf(base.reshape(x.shape))).value
        base[i] = orig
        flat[i] = (float(hi) - float(lo)) / (2.0 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def gradient_suite(seed: int = 0) -> dict[str, float]:
    """Gradient-check every primitive at 10 random points per op.

    Inputs are drawn from [-2, 2] per coordinate, shifted into each op's
    domain where needed (positive for sqrt, denominators away from zero).
    """
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def pt(shape):
        return rng.uniform(-2.0, 2.0, shape)

    def run(name, builder, x):
        err = check_gradient(builder, x)
        results[name] = max(results.get(name, 0.0), err)

    for _ in range(10):
        a, b = pt((4,)), pt((4,))
        run("add", lambda v: sum_(add(v, v.tape.const(b))), a)
        run("sub", lambda v: sum_(sub(v, v.tape.const(b))), a)
        run("mul", lambda v: sum_(mul(v, v.tape.const(b))), a)
        d = np.sign(pt((4,))) * (0.3 + np.abs(pt((4,))))
        run("div", lambda v: sum_(div(v, v.tape.const(d))), a)
        run("div_denom", lambda v: sum_(div(v.tape.const(a), v)), d)
        m, w = pt((3, 4)), pt((4, 2))
        run("matmul", lambda v: sum_(matmul(v, v.tape.const(w))), m)
        run("matmul_rhs", lambda v: sum_(matmul(v.tape.const(m), v)), w)
        vec = pt((4,))
        run("matmul_vec", lambda v: sum_(matmul(v.tape.const(m), v)), vec)
        run("sin", lambda v: sum_(sin(v)), a)
        run("cos", lambda v: sum_(cos(v)), a)
        sp = 0.1 + np.abs(pt((4,)))
        run("sqrt", lambda v: sum_(sqrt(v)), sp)
        run("neg", lambda v: sum_(neg(v)), a)
        run("sum", lambda v: sum_(v), pt((3, 2)))
        run("sum_axis0", lambda v: sum_(sum_(v, axis=0)), pt((3, 2)))
        run("mean", lambda v: mean(v), pt((3, 2)))
        run("mean_axis0", lambda v: sum_(mean(v, axis=0)), pt((3, 2)))
        run("concat", lambda v: sum_(concat([v, v.tape.const(b)], axis=0)), a)
        run("slice", lambda v: sum_(slice_(v, 0, 1, 3)), pt((5,)))
        run("reshape", lambda v: sum_(reshape(v, (6,))), pt((2, 3)))
        aw = pt((4,))  # keep relu inputs away from the kink at 0
        aw = np.where(np.abs(aw) < 1e-3, 0.1, aw)
        run("relu", lambda v: sum_(relu(v)), aw)
        run("leaky_relu", lambda v: sum_(leaky_relu(v)), aw)
        run("tanh", lambda v: sum_(tanh(v)), a)
        run("square", lambda v: sum_(square(v)), a)
    return results
