"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a new :class:`Tensor` holding references to its inputs and a
closure that maps the output gradient to input gradients. ``Tensor.backward``
walks the graph in reverse topological order.

Storage is float32 by default. Ops preserve the dtype of their inputs, which
lets the gradient checker run the very same code path in float64.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """n-d array with an optional gradient buffer and a link into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        out = self.data.reshape(shape)
        return _node(out, (self,), "reshape", lambda g: (g.reshape(src_shape),))

    def flatten(self) -> "Tensor":
        return self.reshape(self.shape[0], -1)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients into every leaf that requires them."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _node(data: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out.op = op
        out.parents = parents
        out._backward = backward
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, inputs before consumers, root last."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


# Activation-pattern recording. The gradient checker uses it to tell whether a
# finite-difference probe crossed a relu kink or flipped a maxpool argmax.
_pattern_log: Optional[list] = None


@contextmanager
def record_patterns():
    global _pattern_log
    prev = _pattern_log
    _pattern_log = []
    try:
        yield _pattern_log
    finally:
        _pattern_log = prev


def _log_pattern(arr: np.ndarray) -> None:
    if _pattern_log is not None:
        _pattern_log.append(np.packbits(arr.ravel()).tobytes() if arr.dtype == bool else arr.tobytes())


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """3x3 cross-correlation, NCHW input, [K, C, 3, 3] weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only, got weight {weight.shape}")
    if wc != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    span_h, span_w = h + 2 * pad - 3, w + 2 * pad - 3
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d output size is not a positive integer for input {x.shape}, stride={stride}, pad={pad}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # im2col per sample: cols[n, (c, ki, kj), (ho, wo)], so the output lands in NCHW directly
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=x.data.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(n, c * 9, ho * wo)
    wmat = weight.data.reshape(k, c * 9)
    out = np.matmul(wmat, cols)
    out += bias.data[:, None]
    out = out.reshape(n, k, ho, wo)

    def backward(g: np.ndarray):
        g3 = g.reshape(n, k, ho * wo)
        gb = g3.sum(axis=(0, 2))
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gx = None
        if _needs_grad(x):
            gcols = np.matmul(wmat.T, g3).reshape(n, c, 3, 3, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gw, gb

    return _node(out, (x, weight, bias), "conv2d", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_pattern(mask)
    out = np.maximum(x.data, 0)
    return _node(out, (x,), "relu", lambda g: (g * mask,))


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/2 max pooling; ties route the gradient to the first element in row-major order."""
    if window != 2 or stride != 2:
        raise ValueError("maxpool2d supports window=2, stride=2 only")
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {x.shape}")
    d = x.data
    a, b, cc, dd = d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2], d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2]
    out = np.maximum(np.maximum(a, b), np.maximum(cc, dd))
    # first maximum in row-major scan order wins ties
    take_a = a == out
    take_b = ~take_a & (b == out)
    take_c = ~(take_a | take_b) & (cc == out)
    take_d = ~(take_a | take_b | take_c)
    _log_pattern(np.stack([take_a, take_b, take_c]))

    def backward(g: np.ndarray):
        gx = np.empty(d.shape, dtype=g.dtype)
        gx[:, :, 0::2, 0::2] = g * take_a
        gx[:, :, 0::2, 1::2] = g * take_b
        gx[:, :, 1::2, 0::2] = g * take_c
        gx[:, :, 1::2, 1::2] = g * take_d
        return (gx,)

    return _node(out, (x,), "maxpool2d", backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g: np.ndarray):
        gx = g @ weight.data.T if _needs_grad(x) else None
        return gx, x.data.T @ g, g.sum(axis=0)

    return _node(out, (x, weight, bias), "fully_connected", backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(out, tuple(tensors), "concat", backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, m = logits.shape
    if n and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward(g: np.ndarray):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), "softmax_cross_entropy", backward)


def euclidean_loss(pred: Tensor, target) -> Tensor:
    """(1/2N) * sum_i ||pred_i - target_i||^2; the target is a constant."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"euclidean_loss shape mismatch: pred {pred.shape} vs target {tgt.shape}")
    n = pred.shape[0]
    diff = pred.data - tgt.astype(pred.data.dtype, copy=False)
    loss = 0.5 * float(np.sum(diff.astype(np.float64) ** 2)) / max(n, 1)
    return _node(
        np.asarray(loss, dtype=pred.data.dtype), (pred,), "euclidean_loss", lambda g: (diff * (g / n),)
    )
