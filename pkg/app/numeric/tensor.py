"""Dense float64 tensors and a record-and-replay tape for reverse-mode gradients.

Every primitive checks shapes up front and refuses to produce non-finite
values. A primitive records itself on the active tape only when one of its
inputs requires a gradient, so evaluation outside a ``Tape`` context costs
nothing extra.
"""
from __future__ import annotations

import contextvars
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from app.errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


def _check_finite(op: str, array: np.ndarray) -> None:
    # a finite sum rules out nan and inf in one pass; an overflowing sum falls through to the exact check
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(array)
    if np.isfinite(total):
        return
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=DTYPE)
        if any(extent <= 0 for extent in array.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {array.shape}")
        _check_finite(name or "tensor", array)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.name = None
        return tensor

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return reduce_mean(self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return reduce_max(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: Backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitives, replayed once in reverse by ``backward``.

    Use as a context manager; the tape is active for the current thread or
    task only, so distinct experiments can record on distinct threads.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._replayed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def operations(self) -> List[str]:
        return [node.op for node in self._nodes]

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: Backward) -> None:
        if self._replayed:
            raise ContractError("tape was already replayed; record the forward pass on a fresh tape")
        self._nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss: Tensor, visit: Optional[Callable[[str], None]] = None) -> None:
        """Fill ``grad`` of every leaf that requires one with d(loss)/d(leaf)."""
        if self._replayed:
            raise ContractError("backward was already run on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._replayed = True

        produced = {id(node.output) for node in self._nodes}
        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        leaf_grads: Dict[int, np.ndarray] = {}

        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
            leaf_grads[id(loss)] = np.ones_like(loss.data)

        for node in reversed(self._nodes):
            if visit is not None:
                visit(node.op)
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue
            input_grads = node.backward(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in produced:
                    pending[key] = pending[key] + grad if key in pending else grad
                else:
                    leaves[key] = tensor
                    leaf_grads[key] = leaf_grads[key] + grad if key in leaf_grads else grad

        for node in self._nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    leaves.setdefault(id(tensor), tensor)

        for key, tensor in leaves.items():
            grad = leaf_grads.get(key)
            tensor.grad = np.zeros_like(tensor.data) if grad is None else np.array(grad, dtype=DTYPE).reshape(tensor.shape)
            _check_finite(f"grad of {tensor.name or 'leaf'}", tensor.grad)
        self._nodes = []


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _result(op: str, array: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: Backward) -> Tensor:
    _check_finite(op, array)
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(array, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _normalize_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} is out of range for shape {x.shape}")
    return axis % x.ndim


# -- binary elementwise -------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise NumericError("div: zero in denominator; guard it with maximum() first")
    return _result("div", a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None))


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _result("scale", x.data * factor, (x,), lambda g: (g * factor,))


def maximum(x: ArrayLike, floor: float) -> Tensor:
    """Elementwise max(x, floor) against a constant floor."""
    x = as_tensor(x)
    passes = x.data > floor
    return _result("maximum", np.maximum(x.data, floor), (x,), lambda g: (g * passes,))


# -- unary elementwise --------------------------------------------------------

def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def logistic(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = special.expit(x.data)
    return _result("logistic", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0.0
    return _result("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x: ArrayLike, eps: float = 0.0) -> Tensor:
    x = as_tensor(x)
    shifted = x.data + eps
    if np.any(shifted <= 0.0):
        raise NumericError("log: non-positive argument")
    return _result("log", np.log(shifted), (x,), lambda g: (g / shifted,))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _result("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: ArrayLike, eps: float = 0.0) -> Tensor:
    x = as_tensor(x)
    shifted = x.data + eps
    if np.any(shifted < 0.0):
        raise NumericError("sqrt: negative argument")
    y = np.sqrt(shifted)

    def _backward(g):
        if np.any(y == 0.0):
            raise NumericError("sqrt: gradient is unbounded at zero; pass eps > 0")
        return (g * 0.5 / y,)

    return _result("sqrt", y, (x,), _backward)


_UNARY = {
    "tanh": tanh,
    "logistic": logistic,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(x: ArrayLike, fn: str, other: Optional[ArrayLike] = None, **kwargs) -> Tensor:
    """Dispatch by name: unary fns take ``x``, binary ones ``x`` and ``other``, ``scale`` a factor."""
    if fn in _UNARY:
        return _UNARY[fn](x, **kwargs)
    if fn in _BINARY:
        if other is None:
            raise ContractError(f"elementwise {fn} needs a second operand")
        return _BINARY[fn](x, other)
    if fn == "scale":
        return scale(x, other if other is not None else kwargs["factor"])
    raise ContractError(f"unknown elementwise function {fn!r}")


# -- linear algebra -----------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    def _backward(g):
        grad_a = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        grad_b = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return grad_a, grad_b

    return _result("matmul", a.data @ b.data, (a, b), _backward)


# -- reductions ---------------------------------------------------------------

def _expand_reduced(g: np.ndarray, x: Tensor, axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def reduce_sum(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _normalize_axis("sum", x, axis)
    return _result("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,),
                   lambda g: (np.array(_expand_reduced(g, x, axis, keepdims)),))


def reduce_mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axis = _normalize_axis("mean", x, axis)
    count = x.size if axis is None else x.shape[axis]
    return _result("mean", np.mean(x.data, axis=axis, keepdims=keepdims), (x,),
                   lambda g: (np.array(_expand_reduced(g, x, axis, keepdims)) / count,))


def reduce_max(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient flows to the first arg-max element only."""
    x = as_tensor(x)
    if axis is None:
        flat = x.data.reshape(-1)
        winner = int(np.argmax(flat))
        value = flat[winner].reshape((1,) * x.ndim if keepdims else ())

        def _backward_all(g):
            grad = np.zeros(flat.shape, dtype=DTYPE)
            grad[winner] = np.asarray(g).reshape(())
            return (grad.reshape(x.shape),)

        return _result("max", np.array(value), (x,), _backward_all)

    axis = _normalize_axis("max", x, axis)
    winners = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    value = np.take_along_axis(x.data, winners, axis=axis)

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, winners, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _result("max", value if keepdims else np.squeeze(value, axis=axis), (x,), _backward)


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(x: ArrayLike, op: str, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if op not in _REDUCERS:
        raise ContractError(f"unknown reduction {op!r}")
    return _REDUCERS[op](x, axis, keepdims)


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis("softmax", x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _result("softmax", y, (x,),
                   lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def logsumexp(x: ArrayLike, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _normalize_axis("logsumexp", x, axis)
    value = special.logsumexp(x.data, axis=axis, keepdims=True)
    weights = np.exp(x.data - value)
    return _result("logsumexp", value if keepdims else np.squeeze(value, axis=axis), (x,),
                   lambda g: (weights * (g if keepdims else np.expand_dims(g, axis)),))


def cross_entropy(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    rows = np.arange(labels.shape[0])
    log_norm = special.logsumexp(logits.data, axis=1, keepdims=True)
    log_probs = logits.data - log_norm
    value = -np.mean(log_probs[rows, labels])

    def _backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (float(g) / labels.shape[0]),)

    return _result("cross_entropy", np.array(value), (logits,), _backward)


# -- shape plumbing -----------------------------------------------------------

def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: ArrayLike, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    axis1 = _normalize_axis("swapaxes", x, axis1)
    axis2 = _normalize_axis("swapaxes", x, axis2)
    return _result("swapaxes", np.swapaxes(x.data, axis1, axis2), (x,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def expand_dims(x: ArrayLike, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim - 1 <= axis <= x.ndim:
        raise DimensionError(f"expand_dims: axis {axis} is out of range for shape {x.shape}")
    return _result("expand_dims", np.expand_dims(x.data, axis), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    axis = _normalize_axis("concat", tensors[0], axis)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(x: ArrayLike, key) -> Tensor:
    x = as_tensor(x)
    try:
        y = np.array(x.data[key])
    except IndexError as exc:
        raise DimensionError(f"index {key!r} is invalid for shape {x.shape}: {exc}") from None

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)

    def _backward(g):
        grad = np.zeros_like(x.data)
        if basic:
            grad[key] += g
        else:
            np.add.at(grad, key, g)
        return (grad,)

    return _result("getitem", y, (x,), _backward)


def gather_rows(table: ArrayLike, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for integer ``ids`` of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")

    def _backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result("gather_rows", table.data[ids], (table,), _backward)
