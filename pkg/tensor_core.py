"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a `Tape` is active are recorded on it whenever at
least one input requires a gradient. `Tape.backward` replays the records in
reverse and accumulates gradients into the leaf tensors. Tapes are single-use:
calling backward a second time without `reset()` raises `UsageError`.

The active-tape stack is thread-local, so concurrent attacks or evaluation
workers each record onto their own tape.
"""

import logging
import math
import struct
import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from exceptions import ConfigurationError, DimensionError, DomainError, LengthError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]

# Added under the square root in the backward rule of distances only
DISTANCE_SMOOTHING = 1e-12

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Innermost tape entered on the current thread, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float64 array that can take part in a tape"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, copy: bool = True):
        if copy:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None
        self._node: Optional["_Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, copy=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))


class _Node:
    __slots__ = ("out", "parents", "needs", "backward")

    def __init__(self, out: Tensor, parents: Tuple[Tensor, ...], needs: Tuple[bool, ...], backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.needs = needs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass"""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._leaves: Dict[int, Tensor] = {}
        self._used = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._used

    def reset(self) -> None:
        """Drop all records so the tape can host a new forward pass"""
        self._nodes.clear()
        self._leaves.clear()
        self._used = False

    def _owns(self, t: Tensor) -> bool:
        return t._node is not None and t.tape is self

    def record(self, out: Tensor, parents: Tuple[Tensor, ...], needs: Tuple[bool, ...], backward: BackwardFn) -> None:
        if self._used:
            raise UsageError("tape already consumed by backward; call reset() before recording again")
        for parent, need in zip(parents, needs):
            if need and not self._owns(parent):
                self._leaves[id(parent)] = parent
        node = _Node(out, parents, needs, backward)
        out._node = node
        out.tape = self
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf on this tape"""
        if self._used:
            raise UsageError("backward already called on this tape; call reset() first")
        if not self._owns(loss):
            raise UsageError("loss was not recorded on this tape")
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._used = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g, node.needs)
            for parent, need, pg in zip(node.parents, node.needs, parent_grads):
                if not need or pg is None:
                    continue
                if self._owns(parent):
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    _accumulate(parent, pg)

        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64)
    else:
        leaf.grad = leaf.grad + g


def backward(loss: Tensor) -> None:
    """Run backward on the tape that recorded `loss`"""
    if loss.tape is None:
        raise UsageError("loss is not on an active tape")
    loss.tape.backward(loss)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, copy=False)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data, copy=False)
    tape = active_tape()
    needs = tuple(p.requires_grad for p in parents)
    if tape is not None and any(needs):
        out.requires_grad = True
        tape.record(out, parents, needs, backward_fn)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _result(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def _backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _result(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def _backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _result(a.data * b.data, (a, b), _backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g, needs: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of a [r, k] and b [k, c]"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def _backward(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return _result(a.data @ b.data, (a, b), _backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = _as_tensor(x)
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), lambda g, needs: (g * positive,))


def prelu(x, slope) -> Tensor:
    """max(x, 0) + slope * min(x, 0) with a single learnable slope"""
    x, slope = _as_tensor(x), _as_tensor(slope)
    if slope.size != 1:
        raise DimensionError("prelu", x.shape, slope.shape)
    a = slope.data.reshape(-1)[0]
    positive = x.data > 0
    negative = x.data < 0
    out = np.where(positive, x.data, a * x.data)

    def _backward(g, needs):
        gx = g * np.where(positive, 1.0, np.where(negative, a, 0.0)) if needs[0] else None
        gs = np.sum(g * np.where(negative, x.data, 0.0)).reshape(slope.shape) if needs[1] else None
        return gx, gs

    return _result(out, (x, slope), _backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g, needs: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g, needs: (g * y,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        bad = float(x.data[x.data <= 0].reshape(-1)[0])
        raise DomainError(f"log of non-positive value {bad}", details={"value": bad})
    return _result(np.log(x.data), (x,), lambda g, needs: (g / x.data,))


def sign(x) -> Tensor:
    """Elementwise sign with sign(0) = 0; contributes no gradient"""
    x = _as_tensor(x)
    return _result(np.sign(x.data), (x,), lambda g, needs: (np.zeros_like(g),))


# ---------------------------------------------------------------------------
# Reductions and reshaping
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (x,), lambda g, needs: (_expand_reduced(g, x.shape, axis, keepdims),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1)
    return _result(np.asarray(out), (x,),
                   lambda g, needs: (_expand_reduced(g / count, x.shape, axis, keepdims),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", x.shape, tuple(shape))
    return _result(out, (x,), lambda g, needs: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    """Collapse every axis after the batch axis"""
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g, needs: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (x,), lambda g, needs: (g - s * g.sum(axis=axis, keepdims=True),))


def norm(x, p: float = 2, axis: Optional[int] = None) -> Tensor:
    """p-norm over all elements or along one axis, p in {1, 2, inf}"""
    x = _as_tensor(x)
    if p == 1:
        out = np.abs(x.data).sum(axis=axis)

        def _backward(g, needs):
            return (_expand_reduced(g, x.shape, axis, False) * np.sign(x.data),)
    elif p == 2:
        out = np.sqrt(np.square(x.data).sum(axis=axis))

        def _backward(g, needs):
            denom = _expand_reduced(np.asarray(out), x.shape, axis, False)
            safe = np.where(denom > 0, denom, 1.0)
            return (np.where(denom > 0, _expand_reduced(g, x.shape, axis, False) * x.data / safe, 0.0),)
    elif p == math.inf:
        mags = np.abs(x.data)
        out = mags.max(axis=axis)

        def _backward(g, needs):
            picked = np.zeros_like(x.data)
            if axis is None:
                picked.reshape(-1)[np.argmax(mags)] = 1.0
            else:
                idx = np.expand_dims(np.argmax(mags, axis=axis), axis)
                np.put_along_axis(picked, idx, 1.0, axis=axis)
            return (picked * np.sign(x.data) * _expand_reduced(g, x.shape, axis, False),)
    else:
        raise ConfigurationError(f"unsupported norm order {p}", details={"p": p})
    return _result(np.asarray(out), (x,), _backward)


# ---------------------------------------------------------------------------
# Convolutional building blocks
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a convolution; the division must be exact"""
    span = size + 2 * padding - kernel
    if kernel > size + 2 * padding or span % stride != 0:
        raise ConfigurationError(
            f"non-integral conv output size: ({size} + 2*{padding} - {kernel}) / {stride}",
            details={"size": size, "kernel": kernel, "stride": stride, "padding": padding},
        )
    return span // stride + 1


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N, C, H, W] with kernels [F, C, kh, kw], zero padded"""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise DimensionError("conv2d", x.shape, kernels.shape)
    n, c, h, w = x.shape
    f, _, kh, kw = kernels.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    parents: Tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (f,):
            raise DimensionError("conv2d bias", bias.shape, (f,))
        out = out + bias.data[None, :, None, None]
        parents = (x, kernels, bias)

    def _backward(g, needs):
        gx = gk = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, kernels.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if needs[1]:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb)[:len(parents)]

    return _result(out, parents, _backward)


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties resolve to the first element of the window in row-major order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("max_pool2d", x.shape)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ConfigurationError(f"pool window {size} larger than input {h}x{w}",
                                 details={"size": size, "height": h, "width": w})
    cropped = x.data[:, :, :ho * size, :wo * size]
    windows = cropped.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def _backward(g, needs):
        mask = np.zeros_like(windows)
        np.put_along_axis(mask, arg, 1.0, axis=-1)
        spread = (mask * g[..., None]).reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros(x.shape)
        gx[:, :, :ho * size, :wo * size] = spread.reshape(n, c, ho * size, wo * size)
        return (gx,)

    return _result(out, (x,), _backward)


def global_avg_pool(x) -> Tensor:
    """[N, C, H, W] -> [N, C]"""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("global_avg_pool", x.shape)
    area = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,), lambda g, needs: (np.broadcast_to(g[:, :, None, None] / area, x.shape),))


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def pairwise_distance(a, b) -> Tensor:
    """Euclidean distances between rows of a [n, d] and rows of b [m, d] -> [n, m].

    The forward value is exact. The backward rule divides by
    sqrt(d^2 + DISTANCE_SMOOTHING) so coincident points get a zero gradient.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError("pairwise_distance", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]
    sq = np.square(diff).sum(axis=-1)
    out = np.sqrt(sq)

    def _backward(g, needs):
        coef = (g / np.sqrt(sq + DISTANCE_SMOOTHING))[..., None] * diff
        return (coef.sum(axis=1) if needs[0] else None,
                -coef.sum(axis=0) if needs[1] else None)

    return _result(out, (a, b), _backward)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def tensor_to_bytes(t: Union[Tensor, np.ndarray]) -> bytes:
    """rank:u32, shape:u32*rank, then little-endian float64 data, row-major"""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0, source: str = "<buffer>") -> Tuple[Tensor, int]:
    """Decode one tensor at `offset`; returns the tensor and the offset after it"""
    if len(buf) - offset < 4:
        raise LengthError(source, offset + 4, len(buf))
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) - offset < 4 * rank:
        raise LengthError(source, offset + 4 * rank, len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    nbytes = 8 * count
    if len(buf) - offset < nbytes:
        raise LengthError(source, offset + nbytes, len(buf))
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
    return Tensor(data, copy=False), offset + nbytes
