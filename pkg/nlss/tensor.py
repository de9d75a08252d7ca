"""A minimal dense tensor with reverse-mode automatic differentiation.

Every `Tensor` wraps a float64 numpy array.  Operations on tensors that require gradients record
their parents and a local gradient rule; `Tensor.backward` walks the recorded graph in reverse
topological order and accumulates gradients into the leaves (tensors created directly with
`requires_grad=True`, usually layer parameters).  Gradients of intermediate results are not kept.

The op set is the one needed to train a small convolutional encoder-decoder: 2-D convolution,
nearest upsampling, relu, batch normalization, channel concatenation, elementwise arithmetic,
log/exp, channel softmax, reductions, slicing and detach.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from nlss.utils import exporter, DimensionError, DomainError, ContractViolation


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

DTYPE = np.float64
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@export
class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "flags", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.flags = set()
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A gradient-free tensor sharing this tensor's values"""
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        """Populate `.grad` on every leaf that requires grad and is reachable from this scalar

        Leaf gradients accumulate across calls; the optimizer zeroes them explicitly.
        """
        if self.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractViolation("backward called on a tensor that is not connected to any parameter")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = np.array(g, dtype=DTYPE) if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def _topological_order(self) -> List["Tensor"]:
        order = []
        visited = set()
        stack = [(self, False)]
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

    # Arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def log(self) -> "Tensor":
        return log(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def relu(self) -> "Tensor":
        return relu(self)


@export
def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


@export
def as_tensor(x: Union[Tensor, np.ndarray, float]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, only keeping graph links when some parent needs gradients"""
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, op=op)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
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
        raise DimensionError(op, f"shapes {a.shape} and {b.shape} do not conform")


@export
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


@export
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


@export
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward, "mul")


@export
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record(out, (a, b), backward, "div")


@export
def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _record(out, (x,), backward, "log")


@export
def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _record(out, (x,), backward, "exp")


@export
def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0

    def backward(g):
        return (g * active,)

    return _record(np.where(active, x.data, 0.0), (x,), backward, "relu")


@export
def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor), gradient passes where x is above the floor"""
    x = as_tensor(x)
    above = x.data > floor

    def backward(g):
        return (g * above,)

    return _record(np.where(above, x.data, floor), (x,), backward, "clamp_min")


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, (tuple, list)) else (axis,)
    return tuple(sorted(a % ndim for a in axes))


@export
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record(out, (x,), backward, "sum")


@export
def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return reduce_sum(x, axes, keepdims) / float(max(count, 1))


@export
def take(x: Tensor, index) -> Tensor:
    """Slicing / indexing, gradients scatter back into the indexed positions"""
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(np.array(out, dtype=DTYPE), (x,), backward, "take")


@export
def softmax(x: Tensor, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DomainError("softmax over an empty channel axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward, "softmax")


@export
def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise DimensionError("concat", f"cannot join {t.shape} to {ref} along axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


@export
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]`, zero padding

    Each sample is contracted on its own, so a sample's output is bitwise the same whatever batch it is in.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError("conv2d", f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    B, _, H, W = x.shape
    _, _, kh, kw = weight.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError("conv2d", f"kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = windows.shape[2], windows.shape[3]
    Cout = weight.shape[0]
    out = np.empty((B, Ho, Wo, Cout), dtype=np.result_type(xp, weight.data))
    for b in range(B):
        out[b] = np.tensordot(windows[b], weight.data, axes=([0, 3, 4], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gwin = np.tensordot(g, weight.data, axes=([1], [0]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (Ho - 1) + 1, stride)
                cols = slice(j, j + stride * (Wo - 1) + 1, stride)
                gxp[:, :, rows, cols] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, backward, "conv2d")


@export
def upsample_nearest2d(x: Tensor, scale: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("upsample_nearest2d", f"expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.repeat(scale, axis=2).repeat(scale, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, scale, W, scale).sum(axis=(3, 5)),)

    return _record(out, (x,), backward, "upsample")


@export
def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of `[B, C, H, W]`

    In training mode the batch statistics normalize the input and the running buffers are
    updated in place (unbiased variance, as the usual convention has it).  In eval mode the
    running buffers are used and the op is a fixed affine map.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("batch_norm", f"expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H * W < 1 or B < 1:
        raise DimensionError("batch_norm", "needs at least one spatial element")
    if gamma.shape != (C,) or running_mean.shape != (C,):
        raise DimensionError("batch_norm", f"{C} channels but parameters of shape {gamma.shape}")
    axes = (0, 2, 3)
    bcast = (None, slice(None), None, None)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = B * H * W
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
    else:
        mean, var, n = running_mean.copy(), running_var.copy(), None
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[bcast]) * invstd[bcast]
    out = gamma.data[bcast] * xhat + beta.data[bcast]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data[bcast]
        if n is None:
            return dxhat * invstd[bcast], ggamma, gbeta
        gx = (invstd[bcast] / n) * (
            n * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward, "batch_norm")


@export
def numerical_gradient(fn: Callable[[], Tensor], t: Tensor, indices: Sequence[int], h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function w.r.t. selected flat entries of `t`"""
    values = np.zeros(len(indices))
    for k, flat in enumerate(indices):
        position = np.unravel_index(flat, t.shape)
        original = t.data[position]
        t.data[position] = original + h
        plus = fn().item()
        t.data[position] = original - h
        minus = fn().item()
        t.data[position] = original
        values[k] = (plus - minus) / (2.0 * h)
    return values


@export
def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients

    :param fn: Builds the scalar loss from scratch on each call
    :param tensors: Leaves to check
    :param h: Finite difference step
    :param max_entries: Check at most this many (randomly chosen) entries per tensor
    :param rng: Chooses the entries
    :return: max over the checked entries of |a - n| / max(|a|, |n|, 1e-6)
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        indices = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            indices = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        numeric = numerical_gradient(fn, t, indices, h)
        exact = a.reshape(-1)[indices]
        scale = np.maximum(np.maximum(np.abs(exact), np.abs(numeric)), 1e-6)
        if indices.size:
            worst = max(worst, float(np.max(np.abs(exact - numeric) / scale)))
    for t in tensors:
        t.zero_grad()
    return worst
