"""
Tensor Module
Dense numpy tensors on a reverse-mode gradient tape, the differentiable
operations the backbone and classifier heads are built from, and the
Adadelta / SGD optimizers.
"""

import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

# Double precision unless a caller opts into float32 (gradient checks then
# only hold to about 1e-3)
DEFAULT_DTYPE = np.float64
FLOAT_DTYPES = (np.float32, np.float64)

# Adadelta defaults for the meta-test optimizer
ADADELTA_RHO = 0.9
ADADELTA_EPS = 1e-6

# Batch-norm constants
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operands do not have compatible shapes"""


class TapeError(ValueError):
    """Raised on misuse of the gradient tape"""


class LabelError(ValueError):
    """Raised when a class label falls outside [0, n_classes)"""


class ZeroNormError(ValueError):
    """Raised when a zero vector has to be normalized"""


class OptimizerError(ValueError):
    """Raised when an optimizer step cannot be applied"""


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created tensors (float64 or float32)"""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in FLOAT_DTYPES:
        raise ValueError(f"Unsupported default dtype: {dtype}")
    DEFAULT_DTYPE = dtype


def get_default_dtype():
    return DEFAULT_DTYPE


class Tensor:
    """
    n-dimensional array that can take part in a gradient tape.

    Leaves with requires_grad=True collect gradients in `.grad` (a numpy
    array shaped like `.data`). Tensors produced by operations while a
    GradTape is active carry a handle to the tape node that produced them.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional["TapeNode"] = None
        self._tape: Optional["GradTape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
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

    @property
    def tape_node(self) -> Optional["TapeNode"]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self, requires_grad: Optional[bool] = None) -> "Tensor":
        """Deep copy of the buffer; gradient and tape handle are not carried over"""
        flag = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=flag)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Division by a tensor is not supported")
        return hadamard(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeNode:
    """One recorded operation: its output, parents and backward rule"""
    index: int
    op: str
    output: Tensor
    parents: Tuple[Tensor, ...]
    backward_fn: BackwardFn


class GradTape:
    """
    Append-only record of the operations of one forward pass.

    Used as a context manager; operations performed inside the block on
    tensors that require gradients are recorded. A tape supports exactly
    one backward pass and is discarded afterwards.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.consumed = False
        self._previous: Optional["GradTape"] = None

    def __enter__(self) -> "GradTape":
        self._previous = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = self._previous
        self._previous = None
        return False

    def record(self, op: str, output: Tensor, parents: Tuple[Tensor, ...],
               backward_fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("Tape already consumed by backward(); open a new GradTape")
        node = TapeNode(len(self.nodes), op, output, parents, backward_fn)
        self.nodes.append(node)
        output._node = node
        output._tape = self

    def backward(self, loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> None:
        """
        Propagate d(loss)/d(x) to every requires_grad leaf reachable from loss.

        Args:
            loss: Scalar tensor recorded on this tape
            params: Optional trainable tensors; any of them left without a
                gradient after the pass receives an all-zero gradient

        Raises:
            TapeError: If loss is not a scalar on this tape or the tape was used
        """
        if self.consumed:
            raise TapeError("backward() already ran on this tape")
        if loss._tape is not self or loss._node is None:
            raise TapeError("Loss tensor was not produced on this tape")
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[:loss._node.index + 1]):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            parent_grads = node.backward_fn(upstream)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                if grad.shape != parent.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {grad.shape} does not match operand {parent.shape}"
                    )
                if parent._tape is self and parent._node is not None:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + grad
                    else:
                        grads[key] = grad
                elif parent.grad is None:
                    parent.grad = np.array(grad, dtype=parent.dtype, copy=True)
                else:
                    parent.grad = parent.grad + grad

        if params is not None:
            for p in params:
                if p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)

        self.consumed = True
        self.nodes = []


def active_tape() -> Optional[GradTape]:
    return getattr(_local, "tape", None)


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> None:
    """Run the backward pass of the tape that produced `loss`"""
    if loss._tape is None:
        raise TapeError("Loss tensor is not on any gradient tape")
    loss._tape.backward(loss, params=params)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn,
            op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(op, out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and algebraic operations
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward_fn, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward_fn, "sub")


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def hadamard(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product with numpy broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"hadamard: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward_fn, "hadamard")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward_fn, "matmul")


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tensor_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), backward_fn, "sum")


def tensor_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return hadamard(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0).astype(a.dtype), (a,),
                   lambda g: (g * mask,), "relu")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward_fn, "concat")


def index_rows(a: ArrayLike, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor"""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)

    def backward_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, rows, g)
        return (out,)

    return _result(a.data[rows], (a,), backward_fn, "index_rows")


def matrix_inverse(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix_inverse expects a square matrix, got {a.shape}")
    inv = np.linalg.inv(a.data)

    def backward_fn(g):
        return (-inv.T @ g @ inv.T,)

    return _result(inv, (a,), backward_fn, "matrix_inverse")


# ---------------------------------------------------------------------------
# Network layers
# ---------------------------------------------------------------------------

def _conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0:
        return 0
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            oh: int, ow: int) -> np.ndarray:
    """Unfold NCHW patches into a (N*OH*OW, C*kh*kw) matrix"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :oh, :ow]
    n, c = x.shape[:2]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _col2im(cols: np.ndarray, x_shape: Tuple[int, ...], kh: int, kw: int,
            stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add a patch-matrix gradient back onto the NCHW input"""
    n, c, h, w = x_shape
    patches = cols.reshape(n, oh, ow, c, kh, kw)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    row_stop = stride * (oh - 1) + 1
    col_stop = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + row_stop:stride, j:j + col_stop:stride] += \
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        return padded[:, :, padding:padding + h, padding:padding + w]
    return padded


def conv2d(x: ArrayLike, kernel: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation of an NCHW input with an OIHW kernel (no bias).

    Args:
        x: Input tensor, shape (N, C, H, W)
        kernel: Kernel tensor, shape (O, C, kh, kw)
        stride: Positive step between output positions
        padding: Zero padding added to each spatial border

    Returns:
        Tensor of shape (N, O, floor((H + 2p - kh)/s) + 1, floor((W + 2p - kw)/s) + 1)
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    o, c_k, kh, kw = kernel.shape
    if c != c_k:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {c_k}")
    oh = _conv_output_extent(h, kh, stride, padding)
    ow = _conv_output_extent(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: {kh}x{kw} kernel with padding {padding} leaves no output positions on a {h}x{w} input"
        )

    cols = _im2col(x.data, kh, kw, stride, padding, oh, ow)
    kmat = kernel.data.reshape(o, -1)
    out = (cols @ kmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = _col2im(gmat @ kmat, x.shape, kh, kw, stride, padding, oh, ow)
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), backward_fn, "conv2d")


def _channel_view(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1)


def batchnorm_inference(x: ArrayLike, mean: ArrayLike, var: ArrayLike, gamma: ArrayLike,
                        beta: ArrayLike, eps: float = BN_EPS) -> Tensor:
    """Per-channel affine normalization with stored statistics only"""
    x, mean, var = as_tensor(x), as_tensor(mean), as_tensor(var)
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or mean.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} does not match statistics {mean.shape}")
    inv_std = 1.0 / np.sqrt(var.data + eps)
    x_hat = (x.data - _channel_view(mean.data)) * _channel_view(inv_std)
    out = _channel_view(gamma.data) * x_hat + _channel_view(beta.data)

    def backward_fn(g):
        gx = g * _channel_view(gamma.data * inv_std) if x.requires_grad else None
        gg = (g * x_hat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return gx, None, None, gg, gb

    return _result(out, (x, mean, var, gamma, beta), backward_fn, "batchnorm_inference")


def batchnorm_train(x: ArrayLike, running_mean: Tensor, running_var: Tensor, gamma: ArrayLike,
                    beta: ArrayLike, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """
    Batch normalization with batch statistics; updates the running buffers
    in place with the given momentum.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - _channel_view(mu)) * _channel_view(inv_std)
    out = _channel_view(gamma.data) * x_hat + _channel_view(beta.data)

    unbiased = var * m / max(m - 1, 1)
    running_mean.data *= (1.0 - momentum)
    running_mean.data += momentum * mu
    running_var.data *= (1.0 - momentum)
    running_var.data += momentum * unbiased

    def backward_fn(g):
        gg = (g * x_hat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            g_hat = g * _channel_view(gamma.data)
            gx = _channel_view(inv_std / m) * (
                m * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True)
            )
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward_fn, "batchnorm_train")


def global_avg_pool(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward_fn, "global_avg_pool")


def l2_normalize(x: ArrayLike, axis: int = -1) -> Tensor:
    """Scale vectors along `axis` to unit Euclidean norm"""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0):
        raise ZeroNormError("l2_normalize: cannot normalize a zero-norm vector")
    y = x.data / norms

    def backward_fn(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norms,)

    return _result(y, (x,), backward_fn, "l2_normalize")


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n_rows:
        raise ShapeError(f"{labels.shape[0]} labels for {n_rows} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: ArrayLike, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels"""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x K logits, got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = (log_z - shifted[np.arange(n), labels]).mean()

    def backward_fn(g):
        probs = softmax(logits.data)
        probs[np.arange(n), labels] -= 1.0
        return (probs * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn,
                   "softmax_cross_entropy")


def sigmoid_binary_cross_entropy(logits: ArrayLike, targets) -> Tensor:
    """Mean elementwise logistic loss against 0/1 targets"""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    x = logits.data
    loss = (np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))).mean()

    def backward_fn(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return ((sig - targets) * (g / x.size),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn,
                   "sigmoid_binary_cross_entropy")


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

def _check_step_inputs(params: Sequence[Tensor], grads: Sequence[np.ndarray],
                       buffers: Sequence[np.ndarray], name: str) -> None:
    if not (len(params) == len(grads) == len(buffers)):
        raise OptimizerError(
            f"{name}: {len(params)} params, {len(grads)} grads, {len(buffers)} state slots"
        )
    for p, g, buf in zip(params, grads, buffers):
        if g is None:
            raise OptimizerError(f"{name}: missing gradient for parameter of shape {p.shape}")
        if g.shape != p.shape or buf.shape != p.shape:
            raise OptimizerError(f"{name}: gradient/state shape mismatch for parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"{name}: non-finite gradient, step rejected")


@dataclass
class AdadeltaState:
    """Running averages E[g^2] and E[dx^2] for a group of parameters"""
    accum_grad_sq: List[np.ndarray]
    accum_update_sq: List[np.ndarray]
    rho: float = ADADELTA_RHO
    eps: float = ADADELTA_EPS
    lr: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise OptimizerError(f"Adadelta rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise OptimizerError(f"Adadelta eps must be positive, got {self.eps}")
        if self.lr < 0:
            raise OptimizerError(f"Adadelta lr must be non-negative, got {self.lr}")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1.0, rho: float = ADADELTA_RHO,
                   eps: float = ADADELTA_EPS) -> "AdadeltaState":
        return cls(
            accum_grad_sq=[np.zeros_like(p.data) for p in params],
            accum_update_sq=[np.zeros_like(p.data) for p in params],
            rho=rho, eps=eps, lr=lr,
        )


def adadelta_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
                  state: AdadeltaState) -> Tuple[Sequence[Tensor], AdadeltaState]:
    """
    One Adadelta update, in place on the parameter buffers.

    E[g^2] <- rho E[g^2] + (1 - rho) g^2
    dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
    param <- param + lr * dx

    Raises:
        OptimizerError: On misaligned inputs or non-finite gradients; nothing
            is modified in that case
    """
    _check_step_inputs(params, grads, state.accum_grad_sq, "adadelta")
    rho, eps = state.rho, state.eps
    for p, g, sq_avg, acc_delta in zip(params, grads, state.accum_grad_sq, state.accum_update_sq):
        sq_avg *= rho
        sq_avg += (1.0 - rho) * g * g
        delta = -np.sqrt(acc_delta + eps) / np.sqrt(sq_avg + eps) * g
        acc_delta *= rho
        acc_delta += (1.0 - rho) * delta * delta
        p.data += state.lr * delta
    return params, state


@dataclass
class SGDState:
    """Momentum buffers and hyperparameters for SGD with weight decay"""
    velocity: List[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 7e-4

    @classmethod
    def for_params(cls, params: Sequence[Tensor], momentum: float = 0.9,
                   weight_decay: float = 7e-4) -> "SGDState":
        return cls([np.zeros_like(p.data) for p in params], momentum, weight_decay)


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SGDState,
                      lr: float) -> None:
    """Heavy-ball SGD step with L2 weight decay folded into the gradient"""
    _check_step_inputs(params, grads, state.velocity, "sgd")
    for p, g, v in zip(params, grads, state.velocity):
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v *= state.momentum
        v += g
        p.data -= lr * v


def cosine_annealing_lr(base_lr: float, step: int, period: int) -> float:
    """Cosine-annealed learning rate with warm restarts every `period` steps"""
    if period <= 0:
        return base_lr
    phase = (step % period) / period
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * phase))
