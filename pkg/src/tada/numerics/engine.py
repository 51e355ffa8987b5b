"""Minimal dense-tensor computation layer with reverse-mode differentiation.

Tensors wrap row-major numpy arrays. Every differentiable primitive records
its inputs and a backward closure on the output tensor; ``backward`` on a
scalar loss traces the graph into a :class:`ComputationTape` and walks it
once in reverse topological order.

Precision is controlled by a context-local default dtype: float64 for tests
and oracle checks, float32 for training runs. Broadcasting is restricted to
leading-batch expansion (a smaller operand whose shape matches the trailing
extents of the larger one); anything else is a :class:`ShapeError`.

Attention masking is exclusion-based: masked-out positions are removed from
the softmax normalization set entirely, so their input values can never leak
into the output, not even at the last bit.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeError, ValidationError

_DEFAULT_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar(
    "tada_default_dtype", default=np.float64
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "tada_grad_enabled", default=True
)

# Output value written to excluded positions of masked log-softmax. Large and
# negative, but finite so downstream arithmetic stays NaN-free.
LOG_EXCLUDED = -1.0e30


def default_dtype() -> type:
    return _DEFAULT_DTYPE.get()


def set_default_dtype(dtype) -> None:
    _DEFAULT_DTYPE.set(np.dtype(dtype).type)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (e.g. ``precision("float32")``)."""
    token = _DEFAULT_DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """A dense array with an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(
        self,
        data: np.ndarray,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "ComputationTape":
        """Reverse-mode pass from a scalar; returns the traversed tape."""
        if self.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {self.shape}")
        tape = ComputationTape.trace(self)
        tape.run(self)
        return tape

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


class ComputationTape:
    """Ordered record of the primitives reachable from a root tensor.

    ``nodes`` is a forward topological order; the backward pass walks it
    reversed, visiting each node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.visits = 0

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                self.visits += 1


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype or default_dtype())
    return Tensor(np.ascontiguousarray(arr), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype()), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or default_dtype()), requires_grad)


def randn(shape, rng: np.random.Generator, std: float = 1.0, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = rng.standard_normal(shape) * std
    return Tensor(arr.astype(dtype or default_dtype()), requires_grad)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _make(op: str, data: np.ndarray, parents: tuple, backward: Callable[[np.ndarray], None]) -> Tensor:
    requires = grad_enabled() and any(p.requires_grad for p in parents)
    if requires:
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Tensor(data, requires_grad=False, op=op)


def _reduce_to(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Sum a gradient over the leading axes added by batch expansion."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_batch_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(op, f"shapes {sa} and {sb} are not equal nor leading-batch expandable")


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_batch_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, _reduce_to(b.shape, g))

    return _make("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_batch_broadcast("sub", a, b)
    out = a.data - b.data

    def backward(g):
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, -_reduce_to(b.shape, g))

    return _make("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_batch_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _reduce_to(a.shape, g * b.data))
        _accum(b, _reduce_to(b.shape, g * a.data))

    return _make("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(g):
        _accum(a, g * c)

    return _make("scale", out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner extents differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make("matmul", out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make("log", out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / out))

    return _make("sqrt", out, (a,), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def backward(g):
        _accum(a, -g * out * out)

    return _make("reciprocal", out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return _make("square", out, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make("abs", out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _make("tanh", out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        dt = (1.0 - t * t) * dinner
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return _make("gelu", out, (a,), backward)


def maximum_const(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); no gradient flows where the floor wins."""
    out = np.maximum(a.data, floor)

    def backward(g):
        _accum(a, g * (a.data > floor))

    return _make("maximum_const", out, (a,), backward)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make("sum", out, (a,), backward)


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def backward(g):
        gg = np.asarray(g) / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make("mean", out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _make("concat", out, tuple(parts), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make("reshape", out, (a,), backward)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.ndim != 2 or not (0 <= lo < hi <= a.shape[1]):
        raise ShapeError("slice_cols", f"range [{lo},{hi}) invalid for shape {a.shape}")
    out = a.data[:, lo:hi].copy()

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, lo:hi] = g
        _accum(a, ga)

    return _make("slice_cols", out, (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose2d", f"expects rank-2, got {a.shape}")
    out = a.data.T.copy()

    def backward(g):
        _accum(a, g.T)

    return _make("transpose2d", out, (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data, requires_grad=False, op="stop_gradient")


# ---------------------------------------------------------------------------
# Gather / scatter / embedding
# ---------------------------------------------------------------------------


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows", f"index must be rank-1, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows", f"index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make("gather_rows", out, (a,), backward)


def scatter_rows(rows: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Place ``rows[i]`` at row ``idx[i]`` of a zero (length, d) array."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValidationError("scatter_rows: duplicate target positions")
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise ShapeError("scatter_rows", f"index out of range for length {length}")
    out = np.zeros((length,) + rows.shape[1:], dtype=rows.dtype)
    out[idx] = rows.data

    def backward(g):
        _accum(rows, g[idx])

    return _make("scatter_rows", out, (rows,), backward)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embed", f"id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make("embed", out, (table,), backward)


# ---------------------------------------------------------------------------
# Normalization, attention, rotary positions
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", f"gain/bias must be ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        gx = g * gain.data
        gxhat_sum = gx.sum(axis=-1, keepdims=True)
        gxhat_dot = (gx * xhat).sum(axis=-1, keepdims=True)
        _accum(x, inv * (gx - gxhat_sum / d - xhat * gxhat_dot / d))

    return _make("layer_norm", out, (x, gain, bias), backward)


def softmax_masked(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the positions where ``mask`` is true.

    Excluded positions get exactly zero weight and their input values never
    enter the computation (they are replaced before the exp), so outputs are
    bit-identical under arbitrary perturbation of excluded inputs.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("softmax_masked", f"mask shape {mask.shape} != input shape {x.shape}")
    if not np.all(mask.any(axis=axis)):
        raise ShapeError("softmax_masked", "a normalization slice has no included positions")
    safe = np.where(mask, x.data, -np.inf)
    m = safe.max(axis=axis, keepdims=True)
    shifted = np.where(mask, x.data - m, 0.0)
    e = np.exp(shifted) * mask
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make("softmax_masked", out, (x,), backward)


def log_softmax(x: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Log-softmax; with a mask, normalization runs over included entries only.

    Excluded outputs are set to the finite constant ``LOG_EXCLUDED`` and carry
    no gradient.
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError("log_softmax", f"mask shape {mask.shape} != input shape {x.shape}")
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("log_softmax", "a normalization slice has no included positions")
    safe = np.where(mask, x.data, -np.inf)
    m = safe.max(axis=axis, keepdims=True)
    shifted = np.where(mask, x.data - m, 0.0)
    e = np.exp(shifted) * mask
    lse = np.log(e.sum(axis=axis, keepdims=True)) + m
    out = np.where(mask, x.data - lse, LOG_EXCLUDED)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        g = g * mask
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make("log_softmax", out, (x,), backward)


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _rope_angles(d: int, positions: np.ndarray, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    positions = np.asarray(positions)
    key = (d, base, np.dtype(dtype).name, positions.tobytes())
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        half = d // 2
        freqs = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
        ang = positions.astype(np.float64)[:, None] * freqs[None, :]
        hit = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
        if len(_ROPE_CACHE) > 512:
            _ROPE_CACHE.clear()
        _ROPE_CACHE[key] = hit
    return hit


def rope(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary rotation of consecutive (even, odd) coordinate pairs.

    Norm-preserving per 2-plane; the backward pass is the inverse rotation.
    """
    if x.ndim != 2 or x.shape[1] % 2 != 0:
        raise ShapeError("rope", f"expects (T, even d), got {x.shape}")
    T, d = x.shape
    positions = np.asarray(positions)
    if positions.shape != (T,):
        raise ShapeError("rope", f"positions must be ({T},), got {positions.shape}")
    cos, sin = _rope_angles(d, positions, base, x.dtype)
    xe, xo = x.data[:, 0::2], x.data[:, 1::2]
    out = np.empty_like(x.data)
    out[:, 0::2] = xe * cos - xo * sin
    out[:, 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[:, 0::2], g[:, 1::2]
        gx = np.empty_like(g)
        gx[:, 0::2] = ge * cos + go * sin
        gx[:, 1::2] = -ge * sin + go * cos
        _accum(x, gx)

    return _make("rope", out, (x,), backward)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            "cross_entropy", f"logits {logits.shape} vs targets {targets.shape}"
        )
    n, v = logits.shape
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    logp = logits.data - m - np.log(z)
    out = np.asarray(-logp[np.arange(n), targets].mean())

    def backward(g):
        p = e / z
        p[np.arange(n), targets] -= 1.0
        _accum(logits, g * p / n)

    return _make("cross_entropy", out, (logits,), backward)


def kl_categorical(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(p) || softmax(q))."""
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ShapeError(
            "kl_categorical", f"shapes {p_logits.shape} and {q_logits.shape} must match, rank 2"
        )
    n = p_logits.shape[0]

    def _logsm(a):
        m = a.max(axis=1, keepdims=True)
        e = np.exp(a - m)
        return a - m - np.log(e.sum(axis=1, keepdims=True))

    logp = _logsm(p_logits.data)
    logq = _logsm(q_logits.data)
    p = np.exp(logp)
    rows = (p * (logp - logq)).sum(axis=1)
    out = np.asarray(rows.mean())

    def backward(g):
        q = np.exp(logq)
        _accum(q_logits, g * (q - p) / n)
        _accum(p_logits, g * p * ((logp - logq) - rows[:, None]) / n)

    return _make("kl_categorical", out, (p_logits, q_logits), backward)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    if a.shape != b.shape:
        raise ShapeError("l1_loss", f"shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.asarray(np.abs(diff).mean())
    n = a.size

    def backward(g):
        s = g * np.sign(diff) / n
        _accum(a, s)
        _accum(b, -s)

    return _make("l1_loss", out, (a, b), backward)


def l2_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference."""
    if a.shape != b.shape:
        raise ShapeError("l2_loss", f"shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean())
    n = a.size

    def backward(g):
        s = g * 2.0 * diff / n
        _accum(a, s)
        _accum(b, -s)

    return _make("l2_loss", out, (a, b), backward)


def custom_op(
    op: str,
    data: np.ndarray,
    parents: Iterable[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Extension point for modules defining their own primitives (e.g. CTC)."""
    return _make(op, data, tuple(parents), backward)
