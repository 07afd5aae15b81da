# Reverse-mode differentiation over a numpy buffer.
#
# Every differentiable op appends a node to the active tape. `backward` walks
# that tape once, in reverse, and then marks it consumed; the next op starts a
# fresh tape. Leading axes are treated as batch axes (numpy matmul stacking),
# the trailing two as the matrix.
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError, StateError, UndefinedMetricError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_grad_enabled = True

LOG_FLOOR = 1e-12


def set_precision(mode: str) -> None:
    """Select the element type for new tensors: "f32" (training) or "f64" (verification)."""
    global _dtype
    if mode not in _PRECISIONS:
        raise ContractError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[mode]


def get_precision() -> str:
    return "f64" if _dtype is np.float64 else "f32"


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(mode: str):
    prev = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape")

    def __init__(self, op, inputs, output, backward_fn, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered log of executed ops. Consumed by exactly one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


_tape = Tape()


def current_tape() -> Tape:
    return _tape


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward_fn, _tape)
        _tape.nodes.append(node)
        out.tape_node = node
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    global _tape
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.tape_node
    if node is None:
        raise StateError("loss was not produced under an active tape")
    tape = node.tape
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward pass")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.tape_node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif t.tape_node.tape is tape:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
            # nodes on an older, consumed tape are treated as constants

    tape.consumed = True
    tape.nodes = []
    if tape is _tape:
        _tape = Tape()


# ---------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), A @ B, bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}") from None
    return _record("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        c = b
        return _record("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (g * c,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _record("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def mean_tokens(x: Tensor) -> Tensor:
    """Mean over the token axis (second to last), keeping it as size 1."""
    x = as_tensor(x)
    n = x.shape[-2]
    return _record(
        "mean_tokens", (x,), x.data.mean(axis=-2, keepdims=True), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _record("transpose", (x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("permute", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record("concat", tuple(xs), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), x.data * mask, lambda g: (g * mask,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (x,), y, bw)


def instance_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """(row - mean) / sqrt(popvar + eps) over the last axis."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"instance_norm_rows needs a non-empty last axis, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record("instance_norm_rows", (x,), y, bw)


def cross_entropy_mean(probs: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean of -log p[i, target_i] over rows whose target is not `ignore_index`.

    `probs` has shape (..., K) with rows on the simplex; `targets` has the same
    leading shape. The log is clamped at LOG_FLOOR.
    """
    probs = as_tensor(probs)
    K = probs.shape[-1]
    P = probs.data.reshape(-1, K)
    t = np.asarray(targets).reshape(-1).astype(np.int64)
    if t.shape[0] != P.shape[0]:
        raise ShapeError(f"cross_entropy_mean: {P.shape[0]} rows but {t.shape[0]} targets")
    if np.abs(P.sum(axis=1) - 1).max(initial=0.0) > 1e-4:
        raise ContractError("cross_entropy_mean: probability rows must sum to 1 within 1e-4")
    valid = np.ones_like(t, dtype=bool) if ignore_index is None else t != ignore_index
    if ((t[valid] < 0) | (t[valid] >= K)).any():
        raise ContractError(f"cross_entropy_mean: target outside [0, {K})")
    n = int(valid.sum())
    if n == 0:
        raise UndefinedMetricError("cross_entropy_mean: every position is ignored")
    rows = np.nonzero(valid)[0]
    cols = t[valid]
    picked = P[rows, cols]
    clamped = np.maximum(picked, LOG_FLOOR)
    loss = -np.log(clamped).sum() / n

    def bw(g):
        grad = np.zeros_like(P)
        grad[rows, cols] = np.where(picked > LOG_FLOOR, -1.0 / (n * clamped), 0.0)
        return ((g * grad).reshape(probs.shape),)

    return _record("cross_entropy_mean", (probs,), np.asarray(loss, dtype=P.dtype), bw)


# ------------------------------------------------------ verification oracle


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar `f` at `x`. f64 only."""
    if x.data.dtype != np.float64:
        raise ContractError("finite_diff_grad requires f64 tensors")
    flat = x.data.reshape(-1)
    out = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(as_tensor(f(x)).data)
            flat[i] = orig - h
            fm = float(as_tensor(f(x)).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return Tensor(out.reshape(x.shape), dtype=np.float64)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor). The floor keeps near-zero entries from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Compare backward() against central differences for each tensor in `params`.

    `f` is a closure that reads the params and returns a scalar loss.
    Returns one max relative error per param.
    """
    for p in params:
        p.grad = None
    backward(f())
    errors = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_diff_grad(lambda _x: f(), p, h).data
        errors.append(max_relative_error(analytic, numeric))
    return errors


def all_finite(x) -> bool:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return bool(np.isfinite(data).all())
