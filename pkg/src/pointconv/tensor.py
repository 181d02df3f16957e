"""Dense tensors with reverse-mode differentiation on an explicit tape.

Values live in contiguous row-major numpy buffers using a process-wide
element type: float32 by default (training), float64 for gradient checking.
Differentiable operations are recorded only inside a ``record()`` block;
``backward()`` replays the tape once in reverse creation order, deposits
gradients on leaf tensors, and clears the tape so a second replay of the
same graph raises instead of double-accumulating.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "BatchNormState",
    "AllocationLog",
    "record",
    "backward",
    "gradient_check",
    "precision",
    "set_default_dtype",
    "default_dtype",
    "track_allocations",
    "as_tensor",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reshape",
    "cast",
    "transpose",
    "concat",
    "gather",
    "batch_norm",
    "dropout",
    "softmax_cross_entropy",
]


class TensorError(ValueError):
    """Raised for shape mismatches and tape misuse."""


_DTYPE = np.dtype(np.float32)
_TAPE: "Tape | None" = None
_ALLOC: "AllocationLog | None" = None
_TAPE_KEYS = itertools.count(1)


def default_dtype() -> np.dtype:
    return _DTYPE


def set_default_dtype(name) -> None:
    """Set the element type for newly created tensors (float32 or float64)."""
    global _DTYPE
    dt = np.dtype(name)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TensorError(f"unsupported element type {name!r}")
    _DTYPE = dt


@contextmanager
def precision(name):
    """Temporarily switch the default element type within a block."""
    global _DTYPE
    old = _DTYPE
    set_default_dtype(name)
    try:
        yield
    finally:
        _DTYPE = old


class AllocationLog:
    """Element counts for every tensor buffer created while tracking is on.

    Operators additionally label their dominant intermediates (via
    ``label``) so memory reports can single out specific buffers, e.g. the
    materialized per-neighbor filter tensor of the naive convolution.
    """

    def __init__(self):
        self.total_elements = 0
        self.allocations = 0
        self.max_single = 0
        self.labeled: dict[str, int] = {}

    def note(self, n: int) -> None:
        n = int(n)
        self.total_elements += n
        self.allocations += 1
        if n > self.max_single:
            self.max_single = n

    def label(self, name: str, n: int) -> None:
        self.labeled[name] = self.labeled.get(name, 0) + int(n)


@contextmanager
def track_allocations():
    """Record tensor allocations inside the block into the yielded log."""
    global _ALLOC
    old = _ALLOC
    log = AllocationLog()
    _ALLOC = log
    try:
        yield log
    finally:
        _ALLOC = old


def label_allocation(name: str, n: int) -> None:
    if _ALLOC is not None:
        _ALLOC.label(name, n)


class Tensor:
    """A dense row-major array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape_key")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape_key = 0
        if _ALLOC is not None:
            _ALLOC.note(arr.size)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, as_tensor(other))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Append-only record of operations; inputs always precede consumers."""

    def __init__(self):
        self.key = next(_TAPE_KEYS)
        self._tags: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._backwards: list[Callable | None] = []
        self._tensors: list[Tensor] = []

    def __len__(self):
        return len(self._tags)

    def append(self, tag, input_ids, backward_fn, tensor) -> int:
        self._tags.append(tag)
        self._inputs.append(tuple(input_ids))
        self._backwards.append(backward_fn)
        self._tensors.append(tensor)
        return len(self._tags) - 1

    def clear(self) -> None:
        self._tags.clear()
        self._inputs.clear()
        self._backwards.clear()
        self._tensors.clear()
        # retire outstanding node_ids held by tensors from the old graph
        self.key = next(_TAPE_KEYS)


@contextmanager
def record():
    """Activate a fresh tape; differentiable ops inside get recorded."""
    global _TAPE
    if _TAPE is not None:
        raise TensorError("record() blocks do not nest")
    tape = Tape()
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = None


def _leaf_id(t: Tensor, tape: Tape) -> int:
    if t.node_id is not None and t._tape_key == tape.key:
        return t.node_id
    nid = tape.append("leaf", (), None, t)
    t.node_id = nid
    t._tape_key = tape.key
    return nid


def _from_op(tag: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)  # ops keep their computed element type
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _TAPE
    if tape is not None and out.requires_grad:
        ids = tuple(_leaf_id(t, tape) if t.requires_grad else -1 for t in inputs)
        out.node_id = tape.append(tag, ids, backward_fn, out)
        out._tape_key = tape.key
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from a scalar loss.

    Visits tape nodes exactly once in reverse creation order, then clears
    the tape; replaying the same graph again raises. Gradients flow as
    float64 regardless of the forward element type, so long accumulations
    do not lose the agreement between algebraically equivalent graphs.
    """
    tape = _TAPE
    if tape is None:
        raise TensorError("backward() requires an active record() block")
    if loss.node_id is None or loss._tape_key != tape.key:
        raise TensorError("loss is not on the active tape (already consumed?)")
    if loss.size != 1:
        raise TensorError(f"loss must be scalar, got shape {loss.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss.node_id] = np.ones(loss.data.shape, dtype=np.float64)
    for nid in range(len(tape) - 1, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        fn = tape._backwards[nid]
        if fn is None:
            leaf = tape._tensors[nid]
            if leaf.grad is None:
                leaf.grad = np.zeros(leaf.data.shape, dtype=np.float64)
            leaf.grad += g
        else:
            for iid, ig in zip(tape._inputs[nid], fn(g)):
                if iid < 0 or ig is None:
                    continue
                grads[iid] = ig if grads[iid] is None else grads[iid] + ig
        grads[nid] = None
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` (trailing-axis rules)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading extents must agree or broadcast from 1."""
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise TensorError(f"matmul shape mismatch: {A.shape} x {B.shape}")
    try:
        data = A @ B
    except ValueError as exc:
        raise TensorError(f"matmul batch mismatch: {A.shape} x {B.shape}") from exc

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _from_op("matmul", data, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Shared affine map on the last axis: y = x @ weight + bias."""
    X, W, c = x.data, weight.data, bias.data
    if X.shape[-1] != W.shape[0] or W.shape[1] != c.shape[-1]:
        raise TensorError(f"linear shape mismatch: x {X.shape}, weight {W.shape}, bias {c.shape}")
    data = X @ W + c
    d_in, d_out = W.shape

    def back(g):
        gx = g @ W.T
        g2 = g.reshape(-1, d_out)
        gw = X.reshape(-1, d_in).T @ g2
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _from_op("linear", data, (x, weight, bias), back)


def _binary(tag, a, b, fwd, back_a, back_b):
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise TensorError(f"{tag} broadcast failure: {a.shape} vs {b.shape}") from exc

    def back(g):
        return (
            _unbroadcast(back_a(g, a.data, b.data), a.data.shape),
            _unbroadcast(back_b(g, a.data, b.data), b.data.shape),
        )

    return _from_op(tag, data, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, A, B: g, lambda g, A, B: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, A, B: g, lambda g, A, B: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, A, B: g * B, lambda g, A, B: g * A)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0):
        raise TensorError("division by zero")
    return _binary(
        "div", a, b, np.divide,
        lambda g, A, B: g / B,
        lambda g, A, B: -g * A / (B * B),
    )


def neg(x: Tensor) -> Tensor:
    return _from_op("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _from_op("scale", x.data * s, (x,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _from_op("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign for overflow-free evaluation
    X = x.data
    s = np.empty_like(X)
    pos = X >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    e = np.exp(X[~pos])
    s[~pos] = e / (1.0 + e)
    return _from_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _check_axis(x: Tensor, axis):
    if axis is None:
        return None
    if not -x.data.ndim <= axis < x.data.ndim:
        raise TensorError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.data.ndim


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(x, axis)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _from_op("sum", data, (x,), back)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    axis = _check_axis(x, axis)
    n = x.data.size if axis is None else x.data.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.data.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _from_op("mean", data, (x,), back)


def reduce_max(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties route the full gradient to the lowest index."""
    axis = _check_axis(x, axis)
    X = x.data
    data = X.max(axis=axis, keepdims=keepdims)

    def back(g):
        gx = np.zeros_like(X)
        if axis is None:
            gx.reshape(-1)[int(np.argmax(X))] = g.reshape(())
        else:
            idx = np.expand_dims(np.argmax(X, axis=axis), axis)
            ge = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, idx, ge, axis)
        return (gx,)

    return _from_op("max", data, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape
    return _from_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def cast(x: Tensor, dtype) -> Tensor:
    """Change element type; gradients pass through unchanged (float64 flow)."""
    return _from_op("cast", x.data.astype(dtype), (x,), lambda g: (g,))


def transpose(x: Tensor, axes) -> Tensor:
    """Permute axes (by copy)."""
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return _from_op("transpose", data, (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op("concat", data, tuple(tensors), back)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Index-select rows along axis 0; backward scatter-adds into x."""
    index = np.asarray(index)
    data = x.data[index]
    n = x.data.shape[0]
    rest = int(np.prod(x.data.shape[1:], dtype=np.int64)) if x.data.ndim > 1 else 1

    def back(g):
        flat_idx = index.reshape(-1)
        gv = g.reshape(flat_idx.size, rest)
        # bincount over flattened (row, column) bins: fast scatter-add
        cols = np.arange(rest)
        bins = (flat_idx[:, None] * rest + cols).ravel()
        acc = np.bincount(bins, weights=gv.ravel(), minlength=n * rest)
        return (acc.reshape(x.data.shape).astype(g.dtype),)

    return _from_op("gather", data, (x,), back)


# ---------------------------------------------------------------------------
# normalization, regularization, loss
# ---------------------------------------------------------------------------


class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=_DTYPE)
        self.running_var = np.ones(channels, dtype=_DTYPE)


def batch_norm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Normalize per channel (last axis) over all other axes.

    Train mode uses batch statistics, updates running stats with the state's
    momentum, and differentiates through the statistics; eval mode uses the
    running statistics as constants.
    """
    X = x.data
    c = X.shape[-1]
    if c != state.channels:
        raise TensorError(f"batch_norm channel mismatch: input {c}, state {state.channels}")
    axes = tuple(range(X.ndim - 1))
    gamma, beta = state.gamma, state.beta

    if train:
        n = int(np.prod([X.shape[i] for i in axes], dtype=np.int64))
        if n < 2:
            raise TensorError("batch_norm train mode needs at least 2 samples per channel")
        mean = X.mean(axis=axes)
        var = X.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (X - mean) * inv_std
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(X.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(X.dtype)

        def back(g):
            g_gamma = (g * xhat).sum(axis=axes)
            g_beta = g.sum(axis=axes)
            g_xhat = g * gamma.data
            # full derivative through the batch mean and variance
            gx = (inv_std / n) * (
                n * g_xhat
                - g_xhat.sum(axis=axes)
                - xhat * (g_xhat * xhat).sum(axis=axes)
            )
            return gx, g_gamma, g_beta

        data = gamma.data * xhat + beta.data
        return _from_op("batch_norm", data, (x, gamma, beta), back)

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (X - state.running_mean) * inv_std

    def back_eval(g):
        return g * gamma.data * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    data = gamma.data * xhat + beta.data
    return _from_op("batch_norm", data, (x, gamma, beta), back_eval)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity in eval mode."""
    if not train or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _from_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-shifted."""
    Z = logits.data
    if Z.ndim != 2:
        raise TensorError(f"logits must be 2-d, got shape {logits.shape}")
    b, c = Z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise TensorError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise TensorError(f"label out of range [0, {c})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = np.asarray((log_norm - shifted[np.arange(b), labels]).mean(), dtype=Z.dtype)
    probs = np.exp(shifted - log_norm[:, None])

    def back(g):
        gz = probs.copy()
        gz[np.arange(b), labels] -= 1.0
        gz *= g.reshape(()) / b
        return (gz.astype(Z.dtype),)

    return _from_op("softmax_cross_entropy", loss, (logits,), back)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def gradient_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps ``x`` to a scalar Tensor and must be deterministic; requires
    64-bit mode. Relative error per entry is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if x.data.dtype != np.float64 or _DTYPE != np.dtype(np.float64):
        raise TensorError("gradient_check requires 64-bit mode")
    x.requires_grad = True
    x.grad = None
    with record():
        y = f(x)
        if y.size != 1:
            raise TensorError("gradient_check target must be scalar")
        backward(y)
    analytic = x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(x).data.reshape(()))
        flat[i] = orig - eps
        down = float(f(x).data.reshape(()))
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def max_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Scale-relative max difference: max|a-b| / max(1e-12, max|a|, max|b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale_ = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale_)
