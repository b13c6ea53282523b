# ndmath.py
"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation computes its value eagerly. When a ``Tape`` is active on the
current thread and an operand requires gradients, the operation is appended
to the tape together with its local backward rule. ``backward(loss)`` walks
the tape in reverse and deposits dLoss/dTensor into the ``grad`` buffer of
every reachable leaf tensor that requires gradients.

Values are stored row-major with a leading batch dimension where models need
one: a batch of vectors is an ``(B, n)`` tensor, weights are ``(n_in, n_out)``
so that ``x @ W`` maps a batch.
"""

import threading
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericError, ShapeError, TapeError

_local = threading.local()

BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _tape_stack() -> List["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite value produced by '{op}'")


class Tensor:
    """A float64 array that may take part in reverse-mode differentiation."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        values = np.array(data, dtype=np.float64)
        _check_finite(values, name or "tensor")
        self.data: np.ndarray = values
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional["Tape"] = None
        self._index: int = -1

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "inputs", "rule", "op")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], rule: BackwardRule, op: str):
        self.out = out
        self.inputs = tuple(inputs)
        self.rule = rule
        self.op = op


class Tape:
    """
    Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    on the same thread are recorded here.
    """

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes.clear()

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: BackwardRule, op: str) -> None:
        out._tape = self
        out._index = len(self.nodes)
        self.nodes.append(_Node(out, inputs, rule, op))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise TapeError("Tape is empty; nothing to differentiate.")
        if loss._tape is not self:
            raise TapeError("Loss was not produced on this tape.")

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._index + 1]):
            upstream = pending.pop(id(node.out), None)
            if upstream is None:
                continue
            for inp, g in zip(node.inputs, node.rule(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                g = _unbroadcast(g, inp.shape)
                if inp._tape is self:
                    key = id(inp)
                    pending[key] = pending[key] + g if key in pending else g
                elif inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64)
                else:
                    inp.grad = inp.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dTensor into every reachable leaf that requires grad."""
    if loss._tape is None:
        raise TapeError("Loss was not produced on a tape; run the forward pass inside `with Tape():`.")
    loss._tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _emit(values: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule, op: str) -> Tensor:
    _check_finite(values, op)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = values
    out.grad = None
    out.requires_grad = needs_grad
    out.name = None
    out._tape = None
    out._index = -1
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(out, inputs, rule, op)
    return out


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"'{op}' operands have incompatible shapes {a.shape} and {b.shape}") from e


# ---------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


# ---------------------------------------------------------
# Pointwise operations
# ---------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


_POINTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch one of add, sub, mul (binary) or sigmoid, tanh (unary)."""
    if op not in _POINTWISE:
        raise ValueError(f"Unknown elementwise op '{op}'. Choose from {tuple(_POINTWISE)}")
    return _POINTWISE[op](*args)


# ---------------------------------------------------------
# Reductions and structure
# ---------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.size == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit(s, (a,), rule, "softmax")


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _emit(np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    try:
        values = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shapes disagree: {[p.shape for p in parts]}") from e
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(values, tuple(parts), rule, "concat")


def take(a: Tensor, index: int, axis: int = -1) -> Tensor:
    """Slice ``index`` along ``axis`` keeping the dimension (width 1)."""
    picked = np.take(a.data, [index], axis=axis)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.full_like(g, index, dtype=np.intp), g, axis=axis)
        return (full,)

    return _emit(picked, (a,), rule, "take")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")


# ---------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------
def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """
    Compare the tape gradient of scalar ``f`` at ``point`` against central
    differences; return the largest relative error over coordinates.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
    if loss._tape is tape:
        tape.backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    base = point.data.astype(np.float64)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[i] += eps
        up = f(Tensor(shifted.reshape(base.shape))).item()
        shifted[i] -= 2 * eps
        down = f(Tensor(shifted.reshape(base.shape))).item()
        flat[i] = (up - down) / (2 * eps)
    return _relative_error(analytic, numeric)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> Dict[str, float]:
    """
    Same check as ``grad_check`` but against the named parameters a
    zero-argument loss closes over. Returns the max relative error per name.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if loss._tape is tape:
        tape.backward(loss)

    errors: Dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat_values = p.data.reshape(-1)
        flat_numeric = numeric.reshape(-1)
        for i in range(p.size):
            keep = flat_values[i]
            flat_values[i] = keep + eps
            up = loss_fn().item()
            flat_values[i] = keep - eps
            down = loss_fn().item()
            flat_values[i] = keep
            flat_numeric[i] = (up - down) / (2 * eps)
        errors[name] = _relative_error(analytic, numeric)
        p.zero_grad()
    return errors


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
