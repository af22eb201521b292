"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and at
least one input requires a gradient, the operation is appended to the tape
together with a closure computing the vector-Jacobian product. Without an
active tape nothing is recorded, which is what inference uses.

    >>> x = Parameter(np.array([1.0, 2.0]))
    >>> with Tape() as tape:
    ...     loss = tensor_sum(mul(x, x))
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4.], dtype=float32)
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InvalidLabelError, InvalidShapeError

DTYPE = np.float32

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "add",
    "mul",
    "tensor_sum",
    "conv2d",
    "dense",
    "relu",
    "global_avg_pool",
    "softmax",
    "sigmoid",
    "cross_entropy",
    "multilabel_soft_margin",
    "sgd_step",
    "clip_grad_norm",
    "zero_grad",
]


class Tensor:
    """A float32 array plus the bookkeeping needed for backpropagation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__


class Parameter(Tensor):
    """A learnable tensor.

    ``layer_group`` orders parameters from the input side (0) to the output
    side and selects the learning rate in :func:`sgd_step`. A parameter with
    ``trainable=False`` is never recorded on a tape and never updated.
    """

    def __init__(self, data, layer_group: int = 0, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        if layer_group < 0:
            raise ConfigurationError("layer_group must be non-negative")
        self.layer_group = int(layer_group)
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def copy(self) -> "Parameter":
        return Parameter(self.data.copy(), self.layer_group, self.trainable)

    def __repr__(self):
        return (f"Parameter(shape={self.shape}, layer_group={self.layer_group}, "
                f"trainable={self.trainable})")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable operations executed while it is active.

    Tapes are per-thread; nesting is allowed and the innermost tape records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> list[int]:
        """Accumulate d(loss)/d(value) into every reachable trainable tensor.

        Returns the indices of the nodes visited, in visiting order. The tape
        is cleared afterwards so intermediate buffers can be released.
        """
        if loss.data.shape != ():
            raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        visited = []
        if not self.nodes:
            return visited
        loss.grad = np.ones((), dtype=DTYPE)
        for idx in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[idx]
            g = node.out.grad
            if g is None:
                continue
            visited.append(idx)
            needs = tuple(t.requires_grad for t in node.inputs)
            grads = node.vjp(g, needs)
            for t, gi, need in zip(node.inputs, grads, needs):
                if not need or gi is None:
                    continue
                if isinstance(t, Parameter):
                    t.grad += gi
                elif t.grad is None:
                    t.grad = gi
                else:
                    t.grad = t.grad + gi
            # intermediate gradients are not needed once propagated
            if not isinstance(node.out, Parameter):
                node.out.grad = None
        self.nodes.clear()
        return visited


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the innermost active tape."""
    tape = _active_tape()
    if loss.data.shape != ():
        raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        return
    tape.backward(loss)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


# elementwise helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _record(out, (a, b), vjp)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=DTYPE))

    def vjp(g, needs):
        return (np.broadcast_to(g, x.shape).astype(DTYPE),)

    return _record(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, DTYPE(0))

    def vjp(g, needs):
        return (g * mask,)

    return _record(out, (x,), vjp)


# convolution and dense layers


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with OIKK filters."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise InvalidShapeError("conv2d expects NCHW input and OIKK weight")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise InvalidShapeError(f"input has {c} channels, weight expects {i}")
    if kh != kw:
        raise InvalidShapeError("only square kernels are supported")
    if bias.shape != (o,):
        raise InvalidShapeError(f"bias shape {bias.shape} does not match {o} filters")
    if stride < 1 or padding < 0:
        raise InvalidShapeError("stride must be positive and padding non-negative")
    k = kh
    ho, wo = _conv_out_size(h, k, stride, padding), _conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidShapeError(f"kernel {k} does not fit a {h}x{w} input")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # per sample: rows (c, ki, kj), columns (ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = wmat @ cols
    out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    padded_shape = xp.shape

    def vjp(g, needs):
        g3 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if needs[1]:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if needs[2]:
            gb = g3.sum(axis=(0, 2))
        if needs[0]:
            dcols = (wmat.T @ g3).reshape(n, c, k, k, ho, wo)
            dxp = np.zeros(padded_shape, dtype=DTYPE)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, ki, kj]
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return gx, gw, gb

    return _record(out, (x, weight, bias), vjp)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for an N x F input and F x C weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise InvalidShapeError("dense expects a 2-D input and 2-D weight")
    if x.shape[1] != weight.shape[0]:
        raise InvalidShapeError(f"inner dimensions differ: {x.shape} vs {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise InvalidShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data + bias.data

    def vjp(g, needs):
        return (g @ weight.data.T if needs[0] else None,
                x.data.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return _record(out, (x, weight, bias), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW batch, giving N x C."""
    if x.data.ndim != 4:
        raise InvalidShapeError("global_avg_pool expects NCHW input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=DTYPE)

    def vjp(g, needs):
        return (np.broadcast_to((g / DTYPE(h * w))[:, :, None, None], x.shape).astype(DTYPE),)

    return _record(out, (x,), vjp)


# probability outputs and losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise InvalidShapeError(f"softmax expects N x C logits with C >= 2, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _record(s, (logits,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_OPEN_LO = np.finfo(DTYPE).tiny
_OPEN_HI = np.float32(1) - np.finfo(DTYPE).epsneg


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, kept inside the open interval (0, 1) at float32 precision."""
    s = np.clip(_sigmoid(x.data), _OPEN_LO, _OPEN_HI)

    def vjp(g, needs):
        return (g * s * (1 - s),)

    return _record(s, (x,), vjp)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise InvalidShapeError("cross_entropy expects N x C logits")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise InvalidShapeError(f"{labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise InvalidLabelError(f"labels must lie in [0, {c})")
    z = logits.data.astype(np.float64)
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=DTYPE)

    def vjp(g, needs):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(DTYPE),)

    return _record(loss, (logits,), vjp)


def multilabel_soft_margin(logits: Tensor, targets) -> Tensor:
    """Mean one-vs-all logistic loss over the batch and the m label columns."""
    targets = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if logits.shape != targets.shape or logits.data.ndim != 2:
        raise InvalidShapeError(f"logits {logits.shape} and targets {targets.shape} differ")
    if not np.all((targets == 0) | (targets == 1)):
        raise InvalidLabelError("multilabel targets must be 0 or 1")
    x = logits.data.astype(np.float64)
    y = targets.astype(np.float64)
    # -[y log s(x) + (1-y) log(1-s(x))] in softplus form
    loss = np.asarray((y * _softplus(-x) + (1 - y) * _softplus(x)).mean(), dtype=DTYPE)

    def vjp(g, needs):
        return (((_sigmoid(x) - y) * (float(g) / x.size)).astype(DTYPE),)

    return _record(loss, (logits,), vjp)


# optimisation


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad.fill(0)


def clip_grad_norm(params: Iterable[Parameter], max_norm: Optional[float]) -> float:
    """Scale trainable grads in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``None`` disables clipping.
    """
    grads = [p.grad for p in params if p.trainable]
    norm = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = DTYPE(max_norm / norm)
        for g in grads:
            g *= scale
    return norm


def sgd_step(params: Iterable[Parameter], group_lrs: Mapping[int, float], momentum: float = 0.9) -> None:
    """Momentum SGD: ``v = momentum * v + grad; value -= lr[group] * v``.

    Non-trainable parameters are left untouched. Gradients of all given
    parameters are zeroed afterwards.
    """
    params = list(params)
    missing = sorted({p.layer_group for p in params if p.trainable} - set(group_lrs))
    if missing:
        raise ConfigurationError(f"no learning rate for layer groups {missing}")
    mom = DTYPE(momentum)
    for p in params:
        if not p.trainable:
            continue
        lr = DTYPE(group_lrs[p.layer_group])
        p.velocity *= mom
        p.velocity += p.grad
        p.data -= lr * p.velocity
    zero_grad(params)
