"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

Tensors are immutable value wrappers around contiguous row-major float64
arrays (rank 0, 1 or 2).  Operations execute eagerly on numpy; when a
GradTape is active on the current thread, each operation also records a
backward closure.  Broadcasting is deliberately restricted: binary ops
accept equal shapes, a (matrix, row-vector) pair, or a scalar operand.
Anything else raises ShapeError so that shape bugs surface at the call
site instead of as silently broadcast garbage.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "leaf",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "sin",
    "cos",
    "softplus",
    "absolute",
    "sign",
    "heaviside",
    "smooth_heaviside",
    "custom_backward",
    "tsum",
    "tmean",
    "slice_rows",
    "slice_cols",
    "concat_cols",
    "stack_rows",
    "dropout",
    "layer_norm",
    "cross_entropy_rows",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes outside the supported broadcast rules."""


class NonFiniteError(ArithmeticError):
    """An operation produced a NaN or infinity."""


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable rank-0/1/2 float64 array value."""

    __slots__ = ("data", "is_leaf", "name")

    def __init__(self, data, *, is_leaf: bool = False, name: str | None = None):
        # asarray with order="C" keeps rank-0 scalars rank-0
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim > 2:
            raise ShapeError(f"tensors are rank 0/1/2, got shape {arr.shape}")
        self.data = arr
        self.is_leaf = is_leaf
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; all dispatch to module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def leaf(data, name: str | None = None) -> Tensor:
    """Create a trainable leaf; tapes accumulate gradients for leaves."""
    return Tensor(data, is_leaf=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _TapeOp:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered record of operations with reverse-order backward replay.

    Leaves touched during recording accumulate gradients additively
    across backward() calls until zero_grad() resets them to exact zeros.
    A tape must stay confined to the thread that recorded it.
    """

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._leaf_grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"

    def _record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._ops.append(_TapeOp(out, inputs, backward))
        for t in inputs:
            if t.is_leaf:
                self._leaves.setdefault(id(t), t)

    def watch(self, t: Tensor) -> None:
        if not t.is_leaf:
            raise ValueError("only leaf tensors can be watched")
        self._leaves.setdefault(id(t), t)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf:
            self._accumulate_leaf(loss, np.ones_like(loss.data))
        for op in reversed(self._ops):
            g = local.pop(id(op.out), None)
            if g is None:
                continue
            grads = op.backward(g)
            for inp, gi in zip(op.inputs, grads):
                if gi is None:
                    continue
                if inp.is_leaf:
                    self._accumulate_leaf(inp, gi)
                else:
                    acc = local.get(id(inp))
                    local[id(inp)] = gi if acc is None else acc + gi

    def _accumulate_leaf(self, t: Tensor, g: np.ndarray) -> None:
        acc = self._leaf_grads.get(id(t))
        self._leaf_grads[id(t)] = np.array(g, copy=True) if acc is None else acc + g

    def grad(self, t: Tensor) -> np.ndarray:
        """Accumulated gradient of a leaf; exact zeros if it was unused."""
        if not t.is_leaf:
            raise ValueError("gradients are accumulated only for leaf tensors")
        g = self._leaf_grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def zero_grad(self) -> None:
        self._leaf_grads.clear()


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"operation {opname!r} produced non-finite values")


def _scalar(g) -> float:
    return float(np.asarray(g).reshape(()))


def _make(out_data: np.ndarray, inputs: tuple, backward: Callable, opname: str) -> Tensor:
    _check_finite(out_data, opname)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward)
    return out


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_b"
    if b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
        return "row_a"
    if b.data.ndim == 0:
        return "scalar_b"
    if a.data.ndim == 0:
        return "scalar_a"
    raise ShapeError(f"unsupported operand shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    # fold the upstream gradient back onto the broadcast operand
    if kind == "same":
        return g
    if kind == "row_b":
        return g.sum(axis=0) if side == "b" else g
    if kind == "row_a":
        return g.sum(axis=0) if side == "a" else g
    if kind == "scalar_b":
        return np.asarray(g.sum()) if side == "b" else g
    if kind == "scalar_a":
        return np.asarray(g.sum()) if side == "a" else g
    raise AssertionError(kind)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def backward(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)

    def backward(g):
        return _reduce_to(g, kind, "a"), _reduce_to(-g, kind, "b")

    return _make(a.data - b.data, (a, b), backward, "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, kind, "a"), _reduce_to(g * ad, kind, "b")

    return _make(ad * bd, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def _elementwise(a, fwd, dfn, opname) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(all="ignore"):
        out = fwd(ad)

    def backward(g):
        return (g * dfn(ad),)

    return _make(out, (a,), backward, opname)


def relu(a) -> Tensor:
    return _elementwise(a, lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(np.float64), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), backward, "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _make(t, (a,), backward, "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        e = np.exp(a.data)

    def backward(g):
        return (g * e,)

    return _make(e, (a,), backward, "exp")


def log(a) -> Tensor:
    return _elementwise(a, np.log, lambda x: 1.0 / x, "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        r = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / r,)

    return _make(r, (a,), backward, "sqrt")


def sin(a) -> Tensor:
    return _elementwise(a, np.sin, np.cos, "sin")


def cos(a) -> Tensor:
    return _elementwise(a, np.cos, lambda x: -np.sin(x), "cos")


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus(a) -> Tensor:
    return _elementwise(a, _softplus_np, _sigmoid_np, "softplus")


def softplus_inverse_np(y: np.ndarray) -> np.ndarray:
    """Inverse of softplus on positive arrays (plain numpy helper)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs strictly positive inputs")
    return y + np.log(-np.expm1(-y))


def absolute(a) -> Tensor:
    return _elementwise(a, np.abs, np.sign, "absolute")


def sign(a) -> Tensor:
    # derivative is zero almost everywhere; treated as exactly zero
    return _elementwise(a, np.sign, lambda x: np.zeros_like(x), "sign")


def custom_backward(forward: Callable[[np.ndarray], np.ndarray],
                    backward: Callable[[np.ndarray], np.ndarray],
                    name: str = "custom") -> Callable[[Tensor], Tensor]:
    """Build an elementwise op with a surrogate derivative.

    The forward value is exact; the backward pass multiplies the upstream
    adjoint by ``backward`` evaluated at the forward *input* (the forward
    output is never consulted).
    """

    def op(a) -> Tensor:
        a = _as_tensor(a)
        ad = a.data

        def bwd(g):
            return (g * backward(ad),)

        return _make(forward(ad), (a,), bwd, name)

    return op


def heaviside_surrogate_np(x: np.ndarray) -> np.ndarray:
    """1 / (1 + (pi*x)^2), the smooth stand-in derivative for the step."""
    return 1.0 / (1.0 + (math.pi * x) ** 2)


# Step opens on strictly positive argument: H(0) = 0.
heaviside = custom_backward(
    lambda x: (x > 0).astype(np.float64), heaviside_surrogate_np, "heaviside"
)

# Test-only smooth variant whose exact derivative equals the surrogate,
# so finite differences can validate the surrogate gradient path.
smooth_heaviside = custom_backward(
    lambda x: 0.5 + np.arctan(math.pi * x) / math.pi,
    heaviside_surrogate_np,
    "smooth_heaviside",
)


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        return (np.full(shape, _scalar(g)),)

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size

    def backward(g):
        return (np.full(shape, _scalar(g) / n),)

    return _make(np.asarray(a.data.mean()), (a,), backward, "mean")


def slice_rows(a, i0: int, i1: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("slice_rows needs a rank-2 tensor")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[i0:i1] = g
        return (full,)

    return _make(a.data[i0:i1].copy(), (a,), backward, "slice_rows")


def slice_cols(a, j0: int, j1: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("slice_cols needs a rank-2 tensor")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, j0:j1] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[:, j0:j1]), (a,), backward, "slice_cols")


def concat_cols(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols needs matching row counts, got {a.shape}, {b.shape}")
    na = a.shape[1]

    def backward(g):
        return g[:, :na], g[:, na:]

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat_cols")


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("stack_rows needs at least one tensor")
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != parts[0].shape[1]:
            raise ShapeError("stack_rows needs rank-2 tensors with equal column counts")
    counts = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + counts)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward, "stack_rows")


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return _make(a.data.copy(), (a,), lambda g: (g,), "dropout")
    keep = (rng.random(a.shape) >= rate).astype(np.float64) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _make(a.data * keep, (a,), backward, "dropout")


LAYER_NORM_EPS = 1e-12


def layer_norm(a, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise layer normalization with affine parameters."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    if a.data.ndim != 2:
        raise ShapeError("layer_norm needs a rank-2 tensor")
    m = a.shape[1]
    if gamma.shape != (m,) or beta.shape != (m,):
        raise ShapeError("layer_norm affine parameters must be row vectors of width %d" % m)
    mu = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(xhat * gd + beta.data, (a, gamma, beta), backward, "layer_norm")


def cross_entropy_rows(logits, labels) -> Tensor:
    """Mean negative log-softmax over rows; labels is an int vector."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy_rows needs rank-2 logits")
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if lab.shape[0] != n:
        raise ShapeError(f"label count {lab.shape[0]} does not match row count {n}")
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError("labels outside class range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = -logp[np.arange(n), lab].mean()
    softmax = ez / sez

    def backward(g):
        d = softmax.copy()
        d[np.arange(n), lab] -= 1.0
        return (d * (_scalar(g) / n),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy_rows")


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative disagreement between tape and central-difference gradients.

    Per coordinate: |analytic - central| / (|central| + 1e-8).  f must be
    smooth around x (no hard steps on the evaluated path).
    """
    probe = leaf(x.data.copy())
    with GradTape() as tape:
        y = f(probe)
        tape.backward(y)
        analytic = tape.grad(probe)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = f(Tensor((flat + bump).reshape(x.shape))).item()
        lo = f(Tensor((flat - bump).reshape(x.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.shape)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))
