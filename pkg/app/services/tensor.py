"""Dense float64 tensors with reverse-mode automatic differentiation.

Every feature map in the pipeline is a :class:`Tensor`. Operations are
:class:`Function` subclasses; applying one records the function on its output
so :meth:`Tensor.backward` can rebuild a topologically ordered :class:`Trace`
and walk it once in reverse.

Broadcasting is limited to extent-1 axes between operands of equal rank.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
import threading
from dataclasses import dataclass
from typing import Any, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
# Sigmoid outputs are kept strictly inside (0, 1).
SIGMOID_LOW = np.finfo(np.float64).tiny
SIGMOID_HIGH = np.nextafter(1.0, 0.0)

_node_ids = itertools.count()
_grad_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an operation."""


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording functions (inference, finite differences)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Function:
    """Base class for differentiable operations.

    ``forward`` receives the raw arrays of the inputs and returns the output
    array. ``backward`` receives dL/d(output) and returns one gradient (or
    ``None``) per input, each shaped like that input.
    """

    kind = "function"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        func = cls(*inputs)
        out_data = func.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """N-dimensional float64 array that participates in autodiff."""

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Function | None = None,
    ) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------
    def __add__(self, other: Any) -> Tensor:
        return Add.apply(self, _lift(other, self))

    def __radd__(self, other: Any) -> Tensor:
        return Add.apply(_lift(other, self), self)

    def __sub__(self, other: Any) -> Tensor:
        return Add.apply(self, Neg.apply(_lift(other, self)))

    def __rsub__(self, other: Any) -> Tensor:
        return Add.apply(_lift(other, self), Neg.apply(self))

    def __mul__(self, other: Any) -> Tensor:
        return Mul.apply(self, _lift(other, self))

    def __rmul__(self, other: Any) -> Tensor:
        return Mul.apply(_lift(other, self), self)

    def __neg__(self) -> Tensor:
        return Neg.apply(self)

    def __truediv__(self, other: Any) -> Tensor:
        if isinstance(other, Tensor):
            return Mul.apply(self, power(other, -1.0))
        return Mul.apply(self, _lift(1.0 / float(other), self))

    def __pow__(self, exponent: Any) -> Tensor:
        return power(self, exponent)

    def __getitem__(self, key: Any) -> Tensor:
        return Index.apply(self, key=key)

    # ------------------------------------------------------------------
    # Shape and reduction helpers
    # ------------------------------------------------------------------
    def reshape(self, *shape: int | Sequence[int]) -> Tensor:
        target = tuple(shape[0]) if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return Reshape.apply(self, shape=tuple(int(s) for s in target))

    def transpose(self, *axes: int) -> Tensor:
        perm = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=perm)

    def sum(self, axes: Sequence[int] | None = None) -> Tensor:
        return reduce(self, "sum", range(self.ndim) if axes is None else axes)

    def mean(self, axes: Sequence[int] | None = None) -> Tensor:
        return reduce(self, "mean", range(self.ndim) if axes is None else axes)

    def max(self, axes: Sequence[int] | None = None) -> Tensor:
        return reduce(self, "max", range(self.ndim) if axes is None else axes)

    # ------------------------------------------------------------------
    # Autodiff
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it with dself/dleaf."""
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        trace = Trace.from_output(self)
        trace.run_backward(self)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1,) * like.ndim, float(value)))


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if len(a) != len(b):
        raise ShapeError(f"{op}: operands must have equal rank, got {a} and {b}")
    out = []
    for ea, eb in zip(a, b):
        if ea != eb and ea != 1 and eb != 1:
            raise ShapeError(f"{op}: shapes {a} and {b} are not broadcastable")
        out.append(max(ea, eb) if 0 not in (ea, eb) else 0)
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


# ----------------------------------------------------------------------
# Trace
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class OpRecord:
    """One executed operation: its kind, operand ids and the saved function."""

    kind: str
    input_ids: tuple[int, ...]
    output_id: int
    function: Function


@dataclass
class Trace:
    """Topologically ordered op records ending at one output tensor."""

    records: list[OpRecord]

    @classmethod
    def from_output(cls, output: Tensor) -> Trace:
        records: list[OpRecord] = []
        visited: set[int] = set()
        # Iterative post-order DFS; graphs over a whole batch exceed the recursion limit.
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if node.creator is None:
                continue
            if expanded:
                records.append(
                    OpRecord(
                        kind=node.creator.kind,
                        input_ids=tuple(t.node_id for t in node.creator.inputs),
                        output_id=node.node_id,
                        function=node.creator,
                    )
                )
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            for parent in reversed(node.creator.inputs):
                if parent.creator is not None and parent.node_id not in visited:
                    stack.append((parent, False))
        return cls(records)

    def run_backward(self, output: Tensor) -> None:
        seed = np.ones_like(output.data)
        if output.is_leaf:
            if output.requires_grad:
                output.grad = seed if output.grad is None else output.grad + seed
            return

        grads: dict[int, np.ndarray] = {output.node_id: seed}
        for record in reversed(self.records):
            grad = grads.pop(record.output_id, None)
            if grad is None:
                continue
            input_grads = record.function.backward(grad)
            for tensor, input_grad in zip(record.function.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.grad = input_grad.copy() if tensor.grad is None else tensor.grad + input_grad
                elif tensor.node_id in grads:
                    grads[tensor.node_id] = grads[tensor.node_id] + input_grad
                else:
                    grads[tensor.node_id] = input_grad


# ----------------------------------------------------------------------
# Elementwise
# ----------------------------------------------------------------------
class Add(Function):
    kind = "add"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape("add", a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, b = self.inputs
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class Mul(Function):
    kind = "mul"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _broadcast_shape("mul", a.shape, b.shape)
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        a, b = self.inputs
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)


class Neg(Function):
    kind = "neg"

    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (-grad,)


class Pow(Function):
    """``x ** p`` with a size-1 exponent tensor; differentiable in both."""

    kind = "pow"

    def forward(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        if p.size != 1:
            raise ShapeError(f"pow: exponent must hold one value, got shape {p.shape}")
        self.out = np.power(x, p.reshape(-1)[0])
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        x, p = self.inputs
        pv = p.data.reshape(-1)[0]
        grad_x = grad * pv * np.power(x.data, pv - 1.0)
        grad_p = None
        if p.requires_grad:
            safe = np.where(x.data > 0, x.data, 1.0)
            grad_p = np.sum(grad * self.out * np.log(safe)).reshape(p.shape)
        return grad_x, grad_p


class LeakyRelu(Function):
    kind = "leaky_relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.where(x > 0, x, LEAKY_SLOPE * x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * np.where(self.inputs[0].data > 0, 1.0, LEAKY_SLOPE),)


class Relu(Function):
    kind = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * (self.inputs[0].data > 0),)


class Sigmoid(Function):
    kind = "sigmoid"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.clip(np.exp(-np.logaddexp(0.0, -x)), SIGMOID_LOW, SIGMOID_HIGH)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.out * (1.0 - self.out),)


class Sqrt(Function):
    kind = "sqrt"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * 0.5 / self.out,)


class ClampMin(Function):
    kind = "clamp_min"

    def forward(self, x: np.ndarray, *, floor: float) -> np.ndarray:
        self.mask = x > floor
        return np.where(self.mask, x, floor)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad * self.mask,)


class LogSoftmax(Function):
    kind = "log_softmax"

    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=-1, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        probs = np.exp(self.out)
        return (grad - probs * grad.sum(axis=-1, keepdims=True),)


# ----------------------------------------------------------------------
# Linear maps
# ----------------------------------------------------------------------
class Dense(Function):
    """``x @ W.T`` over the last axis of ``x``; no bias."""

    kind = "dense"

    def forward(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"dense: input extent {x.shape} does not match weight {w.shape}")
        return x @ w.T

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        x, w = self.inputs
        grad_x = grad @ w.data
        grad_w = grad.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1])
        return grad_x, grad_w


class Conv(Function):
    """Stride-1, zero same-padded cross-correlation.

    ``x`` is ``(B, C_in, *S)`` and the kernel ``(C_out, C_in, *K)`` with
    ``len(S) == len(K) == dims``; the result is ``(B, C_out, *S)``.
    """

    kind = "conv"

    def forward(self, x: np.ndarray, w: np.ndarray, *, dims: int) -> np.ndarray:
        self.dims = dims
        kernel = w.shape[2:]
        self.spatial = x.shape[2:]
        pads = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in kernel]
        padded = np.pad(x, pads)
        self.padded_shape = padded.shape
        window_axes = tuple(range(2, 2 + dims))
        self.windows = sliding_window_view(padded, kernel, axis=window_axes)
        kernel_axes = tuple(range(2 + dims, 2 + 2 * dims))
        out = np.tensordot(self.windows, w, axes=((1,) + kernel_axes, (1,) + window_axes))
        return np.moveaxis(out, -1, 1)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        x, w = self.inputs
        dims = self.dims
        kernel = w.shape[2:]
        spatial_axes = tuple(range(2, 2 + dims))

        grad_w = np.tensordot(grad, self.windows, axes=((0,) + spatial_axes, (0,) + spatial_axes))

        grad_windows = np.tensordot(grad, w.data, axes=((1,), (0,)))
        grad_windows = np.moveaxis(grad_windows, 1 + dims, 1)
        grad_padded = np.zeros(self.padded_shape)
        for offset in itertools.product(*(range(k) for k in kernel)):
            target = (slice(None), slice(None)) + tuple(
                slice(o, o + s) for o, s in zip(offset, self.spatial)
            )
            grad_padded[target] += grad_windows[(Ellipsis,) + offset]
        crop = (slice(None), slice(None)) + tuple(slice(k // 2, k // 2 + s) for k, s in zip(kernel, self.spatial))
        return grad_padded[crop], grad_w


# ----------------------------------------------------------------------
# Reductions and shape ops
# ----------------------------------------------------------------------
class Reduce(Function):
    kind = "reduce"

    def forward(self, x: np.ndarray, *, op: str, axes: tuple[int, ...]) -> np.ndarray:
        self.op = op
        self.axes = axes
        if op == "sum":
            return x.sum(axis=axes, keepdims=True)
        if op == "mean":
            self.count = int(np.prod([x.shape[a] for a in axes]))
            return x.mean(axis=axes, keepdims=True)
        if op == "max":
            kept = [a for a in range(x.ndim) if a not in axes]
            moved = np.transpose(x, kept + list(axes))
            flat = moved.reshape(moved.shape[: len(kept)] + (-1,))
            winner = np.argmax(flat, axis=-1)
            mask = np.zeros_like(flat)
            np.put_along_axis(mask, winner[..., None], 1.0, axis=-1)
            self.mask = np.transpose(mask.reshape(moved.shape), np.argsort(kept + list(axes)))
            return x.max(axis=axes, keepdims=True)
        raise ValueError(f"reduce: unknown op {op!r}")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        shape = self.inputs[0].shape
        if self.op == "sum":
            return (np.broadcast_to(grad, shape).copy(),)
        if self.op == "mean":
            return (np.broadcast_to(grad, shape) / self.count,)
        return (grad * self.mask,)


class Reshape(Function):
    kind = "reshape"

    def forward(self, x: np.ndarray, *, shape: tuple[int, ...]) -> np.ndarray:
        if int(np.prod(shape)) != x.size or any(s < 0 for s in shape):
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    kind = "transpose"

    def forward(self, x: np.ndarray, *, axes: tuple[int, ...]) -> np.ndarray:
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class Index(Function):
    kind = "index"

    def forward(self, x: np.ndarray, *, key: Any) -> np.ndarray:
        self.key = key
        return np.array(x[key])

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        out = np.zeros(self.inputs[0].shape)
        np.add.at(out, self.key, grad)
        return (out,)


class Stack(Function):
    kind = "stack"

    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ShapeError(f"stack: operands differ in shape {sorted(shapes)}")
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        return tuple(np.take(grad, i, axis=self.axis) for i in range(len(self.inputs)))


# ----------------------------------------------------------------------
# Public op vocabulary
# ----------------------------------------------------------------------
def conv(x: Tensor, kernel: Tensor, dims: int) -> Tensor:
    """Same-padded cross-correlation over the trailing ``dims`` axes.

    Rank-``dims`` operands are read as a single channel without batch, so
    ``conv(Tensor([1, 2, 3]), Tensor([1, 1, 1]), dims=1)`` gives ``[3, 6, 5]``.
    """
    if dims not in (1, 2):
        raise ShapeError(f"conv: dims must be 1 or 2, got {dims}")
    kernel_extent = kernel.shape[-dims:]
    if any(k % 2 == 0 for k in kernel_extent):
        raise ShapeError(f"conv: kernel extents must be odd, got {kernel_extent}")

    bare_input = x.ndim == dims
    if bare_input:
        x = x.reshape((1, 1) + x.shape)
    if kernel.ndim == dims:
        kernel = kernel.reshape((1, 1) + kernel.shape)
    if x.ndim != dims + 2 or kernel.ndim != dims + 2:
        raise ShapeError(f"conv: expected rank {dims + 2} operands, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv: input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}")

    out = Conv.apply(x, kernel, dims=dims)
    if bare_input:
        if kernel.shape[0] != 1:
            raise ShapeError("conv: a bare input needs a single output channel")
        out = out.reshape(out.shape[2:])
    return out


def dense(x: Tensor, weight: Tensor) -> Tensor:
    return Dense.apply(x, weight)


def leaky_relu(x: Tensor) -> Tensor:
    return LeakyRelu.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    return ClampMin.apply(x, floor=float(floor))


def log_softmax(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


def power(x: Tensor, exponent: Tensor | float) -> Tensor:
    if not isinstance(exponent, Tensor):
        exponent = Tensor([float(exponent)])
    return Pow.apply(x, exponent)


def reduce(x: Tensor, op: str, axes: Sequence[int]) -> Tensor:
    """Reduce ``axes`` with ``sum``, ``mean`` or ``max``; reduced axes keep extent 1.

    Max routes its gradient to the first maximal index.
    """
    normalized = tuple(sorted({a % x.ndim for a in axes})) if x.ndim else ()
    if not normalized:
        return x
    empty = [a for a in normalized if x.shape[a] == 0]
    if empty:
        raise ShapeError(f"reduce: cannot {op} over empty axes {empty} of {x.shape}")
    return Reduce.apply(x, op=op, axes=normalized)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "add":
        return Add.apply(a, b)
    if op == "mul":
        return Mul.apply(a, b)
    raise ValueError(f"elementwise: unknown op {op!r}")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


# ----------------------------------------------------------------------
# Parameter containers
# ----------------------------------------------------------------------
class Module:
    """Owner of trainable tensors, addressed by stable dotted paths."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        found: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            _collect(value, path, found)
        return found

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {path: tensor.data.copy() for path, tensor in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for path, tensor in params.items():
            value = np.asarray(state[path], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeError(f"{path}: stored shape {value.shape} != parameter shape {tensor.shape}")
            tensor.data = value.copy()


def _collect(value: Any, path: str, found: dict[str, Tensor]) -> None:
    if isinstance(value, Tensor):
        if value.requires_grad:
            found[path] = value
    elif isinstance(value, Module):
        found.update(value.named_parameters(prefix=f"{path}."))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect(item, f"{path}.{i}", found)
    elif isinstance(value, dict):
        for key, item in value.items():
            _collect(item, f"{path}.{key}", found)


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)
