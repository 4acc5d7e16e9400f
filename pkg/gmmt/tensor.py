from __future__ import annotations

import contextlib
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateBatchError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS: dict[str, type[np.floating]] = {
    "float64": np.float64,
    "float32": np.float32,
}

NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1
GRAD_CHECK_STEP = 1e-5

_dtype: type[np.floating] = np.float64
_local = threading.local()
_check_finite = os.getenv("GMMT_CHECK_FINITE", "").strip().lower() in {"1", "true", "yes"}
# Activation masks recorded by relu/clip while a grad check perturbs the objective.
_kink_trace: list[bytes] | None = None

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def set_precision(name: str) -> None:
    global _dtype
    key = (name or "").strip().lower()
    if key not in PRECISIONS:
        raise ConfigurationError(f"Unknown precision {name!r}; expected one of {', '.join(PRECISIONS)}.")
    _dtype = PRECISIONS[key]


def get_dtype() -> type[np.floating]:
    return _dtype


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops run inside record no graph (per thread)."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextlib.contextmanager
def _trace_kinks() -> Iterator[list[bytes]]:
    global _kink_trace
    previous = _kink_trace
    _kink_trace = []
    try:
        yield _kink_trace
    finally:
        _kink_trace = previous


def _record_mask(mask: np.ndarray) -> None:
    if _kink_trace is not None:
        _kink_trace.append(np.packbits(mask.reshape(-1)).tobytes())


def _assert_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s) of {np.size(values)}.")


class Tensor:
    """Dense array node of the reverse-mode graph.

    Leaves accumulate into ``grad``; interior nodes drop their graph links once
    ``backward`` has run, so nothing is retained across training steps.
    """

    def __init__(self, data: np.ndarray | float | Sequence[float], *, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}.")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor | np.ndarray | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Tensor | np.ndarray | float) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Tensor | np.ndarray | float) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Tensor | np.ndarray | float) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Tensor | np.ndarray | float) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Tensor | np.ndarray | float) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}.")
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if _check_finite:
                _assert_finite(node_grad, f"gradient of {node._op or 'leaf'}")
            if node._backward is None:
                if node.grad is None:
                    node.grad = node_grad.copy()
                else:
                    node.grad += node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


class Param(Tensor):
    """Learnable tensor with its gradient and SGD momentum buffer."""

    def __init__(self, value: np.ndarray | float | Sequence[float], name: str = "") -> None:
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.momentum_buffer = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name or 'unnamed'}, shape={self.shape})"


@dataclass
class NormParams:
    gamma: Param
    beta: Param
    running_mean: np.ndarray = field(repr=False)
    running_var: np.ndarray = field(repr=False)

    @classmethod
    def create(cls, channels: int, name: str) -> NormParams:
        dtype = get_dtype()
        return cls(
            gamma=Param(np.ones(channels, dtype=dtype), f"{name}.gamma"),
            beta=Param(np.zeros(channels, dtype=dtype), f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def parameters(self) -> list[Param]:
        return [self.gamma, self.beta]


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: Tensor | np.ndarray | float | Sequence[float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Backward, op: str) -> Tensor:
    requires = grad_enabled() and any(parent.requires_grad for parent in parents)
    out = Tensor(data, requires_grad=requires)
    out._op = op
    if requires:
        out._parents = tuple(parents)
        out._backward = backward
    if _check_finite:
        _assert_finite(out.data, f"output of {op}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------


def add(a: Tensor | np.ndarray | float, b: Tensor | np.ndarray | float) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor | np.ndarray | float, b: Tensor | np.ndarray | float) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor | np.ndarray | float, b: Tensor | np.ndarray | float) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor | np.ndarray, factor: float) -> Tensor:
    x = as_tensor(x)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * factor,)

    return _make(x.data * factor, (x,), backward, "scale")


def relu(x: Tensor | np.ndarray) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _record_mask(mask)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor | np.ndarray) -> Tensor:
    x = as_tensor(x)
    positive = x.data >= 0
    exp_neg = np.exp(-np.abs(x.data))
    out = np.where(positive, 1.0 / (1.0 + exp_neg), exp_neg / (1.0 + exp_neg))

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def clip(x: Tensor | np.ndarray, low: float, high: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= low) & (x.data <= high)
    _record_mask(inside)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * inside,)

    return _make(np.clip(x.data, low, high), (x,), backward, "clip")


# --- reductions and reshaping ----------------------------------------------


def total(x: Tensor | np.ndarray) -> Tensor:
    x = as_tensor(x)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean(x: Tensor | np.ndarray) -> Tensor:
    x = as_tensor(x)
    count = max(x.size, 1)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad / count, x.shape).copy(),)

    return _make(np.asarray(x.data.mean() if x.size else 0.0), (x,), backward, "mean")


def reshape(x: Tensor | np.ndarray, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    original = x.shape

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(original),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def spatial_mean(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_mean expects [N, C, H, W], got {x.shape}.")
    height, width = x.shape[2:]

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.broadcast_to(grad[:, :, None, None] / (height * width), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "spatial_mean")


def broadcast_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """[N, E] -> [N, E, H, W] with every position holding the same vector."""
    if x.ndim != 2:
        raise ShapeError(f"broadcast_spatial expects [N, E], got {x.shape}.")
    out = np.broadcast_to(x.data[:, :, None, None], (*x.shape, height, width)).copy()

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.sum(axis=(2, 3)),)

    return _make(out, (x,), backward, "broadcast_spatial")


def gather_at(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick x[n, :, rows[n], cols[n]] for every sample: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ShapeError(f"gather_at expects [N, C, H, W], got {x.shape}.")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    batch = np.arange(x.shape[0])
    picked = x.data[batch, :, rows, cols]

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(x.data)
        np.add.at(out, (batch, slice(None), rows, cols), grad)
        return (out,)

    return _make(picked, (x,), backward, "gather_at")


def channel_concat(*tensors: Tensor | np.ndarray) -> Tensor:
    """Concatenate along the channel axis of [C, H, W] or [N, C, H, W] maps."""
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("channel_concat needs at least one tensor.")
    reference = parts[0].shape
    if len(reference) < 3:
        raise ShapeError(f"channel_concat expects [C, H, W] or [N, C, H, W], got {reference}.")
    for part in parts[1:]:
        if part.ndim != len(reference) or part.shape[:-3] != reference[:-3] or part.shape[-2:] != reference[-2:]:
            raise ShapeError(f"channel_concat spatial mismatch: {reference} vs {part.shape}.")
    bounds = np.cumsum([0, *(part.shape[-3] for part in parts)])

    def backward(grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(grad[..., bounds[i] : bounds[i + 1], :, :] for i in range(len(parts)))

    return _make(np.concatenate([part.data for part in parts], axis=-3), parts, backward, "channel_concat")


def channel_slice(x: Tensor | np.ndarray, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    channels = x.shape[-3]
    if not 0 <= start <= stop <= channels:
        raise ShapeError(f"channel_slice [{start}, {stop}) outside {channels} channels.")

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros_like(x.data)
        out[..., start:stop, :, :] = grad
        return (out,)

    return _make(x.data[..., start:stop, :, :].copy(), (x,), backward, "channel_slice")


# --- layers ----------------------------------------------------------------


def _im2col(padded: np.ndarray, out_h: int, out_w: int, stride: int) -> np.ndarray:
    batch, channels = padded.shape[:2]
    patches = [
        padded[:, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride]
        for i in range(3)
        for j in range(3)
    ]
    return np.stack(patches, axis=2).reshape(batch, channels * 9, out_h * out_w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], out_h: int, out_w: int, stride: int) -> np.ndarray:
    batch, channels = shape[:2]
    patches = cols.reshape(batch, channels, 9, out_h, out_w)
    out = np.zeros(shape, dtype=cols.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        out[:, :, i : i + stride * (out_h - 1) + 1 : stride, j : j + stride * (out_w - 1) + 1 : stride] += patches[:, :, k]
    return out


def conv2d(
    x: Tensor | np.ndarray,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    pad: int = 1,
) -> Tensor:
    """3x3 cross-correlation over [C_in, H, W] or [N, C_in, H, W] input."""
    x = as_tensor(x)
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d expects [C, H, W] or [N, C, H, W], got {x.shape}.")
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only, got weight {weight.shape}.")
    data = x.data[None] if unbatched else x.data
    batch, in_channels, height, width = data.shape
    out_channels = weight.shape[0]
    if weight.shape[1] != in_channels:
        raise ShapeError(f"conv2d weight expects {weight.shape[1]} input channels, got {in_channels}.")
    if bias is not None and bias.shape != (out_channels,):
        raise ShapeError(f"conv2d bias must have shape ({out_channels},), got {bias.shape}.")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}.")
    if height + 2 * pad < 3 or width + 2 * pad < 3:
        raise ShapeError(f"conv2d input {height}x{width} with pad {pad} is smaller than the 3x3 kernel.")

    out_h = (height + 2 * pad - 3) // stride + 1
    out_w = (width + 2 * pad - 3) // stride + 1
    padded = np.pad(data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(padded, out_h, out_w, stride)
    kernel = weight.data.reshape(out_channels, in_channels * 9)
    out = np.matmul(kernel, cols).reshape(batch, out_channels, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(grad: np.ndarray) -> tuple[np.ndarray, ...]:
        grad4 = grad[None] if unbatched else grad
        flat = grad4.reshape(batch, out_channels, out_h * out_w)
        grad_weight = np.tensordot(flat, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grad_cols = np.matmul(kernel.T, flat)
        grad_padded = _col2im(grad_cols, padded.shape, out_h, out_w, stride)
        grad_input = grad_padded[:, :, pad : pad + height, pad : pad + width]
        if unbatched:
            grad_input = grad_input[0]
        grads: list[np.ndarray] = [grad_input, grad_weight]
        if bias is not None:
            grads.append(grad4.sum(axis=(0, 2, 3)))
        return grads

    parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if unbatched else out, parents, backward, "conv2d")


def linear(x: Tensor | np.ndarray, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """[N, in] @ weight[out, in].T + bias[out]."""
    x = as_tensor(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}.")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data[None, :]

    def backward(grad: np.ndarray) -> tuple[np.ndarray, ...]:
        grads: list[np.ndarray] = [grad @ weight.data, grad.T @ x.data]
        if bias is not None:
            grads.append(grad.sum(axis=0))
        return grads

    parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


def _affine_normalize(
    x: Tensor,
    norm: NormParams,
    axes: tuple[int, ...],
    stats: tuple[np.ndarray, np.ndarray] | None,
    op: str,
) -> Tensor:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, channel axis 1.

    With ``stats`` given the statistics are constants (eval mode); otherwise
    they are taken from ``x`` over ``axes`` and differentiated through.
    """
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    gamma = norm.gamma.data.reshape(shape)
    beta = norm.beta.data.reshape(shape)
    if stats is None:
        center = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - center
        variance = (centered**2).mean(axis=axes, keepdims=True)
    else:
        centered = x.data - stats[0].reshape(shape)
        variance = stats[1].reshape(shape)
    inv_std = 1.0 / np.sqrt(variance + NORM_EPS)
    normalized = centered * inv_std
    reduce_axes = tuple(axis for axis in range(x.ndim) if axis != 1)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (grad * normalized).sum(axis=reduce_axes)
        grad_beta = grad.sum(axis=reduce_axes)
        grad_hat = grad * gamma
        if stats is None:
            grad_input = inv_std * (
                grad_hat
                - grad_hat.mean(axis=axes, keepdims=True)
                - normalized * (grad_hat * normalized).mean(axis=axes, keepdims=True)
            )
        else:
            grad_input = grad_hat * inv_std
        return grad_input, grad_gamma, grad_beta

    return _make(normalized * gamma + beta, (x, norm.gamma, norm.beta), backward, op)


def batch_norm(x: Tensor, norm: NormParams, *, training: bool, update_running: bool = True) -> Tensor:
    """Batch statistics in training mode, running statistics in eval mode."""
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects [N, C] or [N, C, H, W], got {x.shape}.")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    if not training:
        return _affine_normalize(x, norm, axes, (norm.running_mean, norm.running_var), "batch_norm")
    if x.shape[0] < 2:
        raise DegenerateBatchError(f"batch_norm in train mode needs at least 2 samples, got {x.shape[0]}.")
    if update_running:
        count = x.size // x.shape[1]
        batch_mean = x.data.mean(axis=axes)
        batch_var = x.data.var(axis=axes) * count / max(count - 1, 1)
        norm.running_mean[...] = (1 - BATCH_NORM_MOMENTUM) * norm.running_mean + BATCH_NORM_MOMENTUM * batch_mean
        norm.running_var[...] = (1 - BATCH_NORM_MOMENTUM) * norm.running_var + BATCH_NORM_MOMENTUM * batch_var
    return _affine_normalize(x, norm, axes, None, "batch_norm")


def instance_norm(x: Tensor, norm: NormParams) -> Tensor:
    """Per-sample, per-channel statistics over H x W."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects [N, C, H, W], got {x.shape}.")
    return _affine_normalize(x, norm, (2, 3), None, "instance_norm")


def mse(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}.")
    diff = a.data - b.data
    count = max(diff.size, 1)

    def backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scaled = grad * 2.0 * diff / count
        return scaled, -scaled

    return _make(np.asarray((diff**2).mean() if diff.size else 0.0), (a, b), backward, "mse")


# --- optimisation ----------------------------------------------------------


def zero_grad(params: Iterable[Param]) -> None:
    for param in params:
        param.zero_grad()


def sgd_step(params: Sequence[Param], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """buf <- momentum*buf + grad + weight_decay*value; value <- value - lr*buf; grads zeroed."""
    for param in params:
        finite = np.isfinite(param.grad)
        if not finite.all():
            bad = int(param.grad.size - np.count_nonzero(finite))
            logger.error("Non-finite gradient in %s (%d of %d entries)", param.name or "unnamed", bad, param.grad.size)
            raise NonFiniteError(
                f"Non-finite gradient in {param.name or 'unnamed parameter'}: {bad} of {param.grad.size} entries."
            )
    for param in params:
        buffer = param.momentum_buffer
        buffer *= momentum
        buffer += param.grad
        if weight_decay:
            buffer += weight_decay * param.data
        param.data -= lr * buffer
        param.grad[...] = 0.0


# --- verification ----------------------------------------------------------


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    step: float = GRAD_CHECK_STEP,
    seed: int = 0,
    max_entries: int | None = None,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``fn`` rebuilds the graph from ``inputs`` on every call. Its output is reduced
    to a scalar through a fixed random projection. The error of each input is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``.
    Entries whose +/- perturbations land on different sides of a relu/clip kink are
    skipped. ``max_entries`` checks a seeded random subset of each input.

    The check always runs in float64: the precision and any float32 input values
    are switched for its duration and restored afterwards, along with each input's
    ``requires_grad`` flag and accumulated gradient.
    """
    global _dtype
    saved_dtype = _dtype
    saved = [(tensor.data, tensor.requires_grad, tensor.grad) for tensor in inputs]
    _dtype = np.float64
    for tensor in inputs:
        if tensor.data.dtype != np.float64:
            tensor.data = tensor.data.astype(np.float64)
        tensor.requires_grad = True
        tensor.grad = np.zeros_like(tensor.data)
    try:
        rng = np.random.default_rng(seed)
        with no_grad():
            reference = fn()
        projection = rng.standard_normal(reference.shape)

        def objective() -> Tensor:
            return total(mul(fn(), projection))

        objective().backward()
        analytic = [tensor.grad.copy() for tensor in inputs]
        worst = 0.0
        for tensor, grad in zip(inputs, analytic):
            indices = list(np.ndindex(tensor.shape))
            if max_entries is not None and len(indices) > max_entries:
                chosen = rng.choice(len(indices), size=max_entries, replace=False)
                indices = [indices[i] for i in sorted(chosen)]
            errors: list[float] = []
            numerics: list[float] = []
            for index in indices:
                original = tensor.data[index]
                with no_grad(), _trace_kinks() as plus_masks:
                    tensor.data[index] = original + step
                    plus = float(objective().data)
                with no_grad(), _trace_kinks() as minus_masks:
                    tensor.data[index] = original - step
                    minus = float(objective().data)
                tensor.data[index] = original
                if plus_masks != minus_masks:
                    continue
                numeric = (plus - minus) / (2.0 * step)
                numerics.append(abs(numeric))
                errors.append(abs(grad[index] - numeric))
            if not errors:
                continue
            denominator = max(float(np.abs(grad).max(initial=0.0)), max(numerics), 1e-12)
            worst = max(worst, max(errors) / denominator)
        return worst
    finally:
        _dtype = saved_dtype
        for tensor, (data, requires_grad, grad) in zip(inputs, saved):
            tensor.data = data
            tensor.requires_grad = requires_grad
            tensor.grad = grad
            if isinstance(tensor, Param) and grad is None:
                tensor.grad = np.zeros_like(data)
