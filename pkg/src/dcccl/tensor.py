"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the handful of operations a small CNN needs are provided: 2-D
convolution, max pooling, affine layers, ReLU, reshapes, addition and the
two losses used for training (softmax cross-entropy and MSE).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (e.g. a second backward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data, dtype=np.float64)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf needing it."""
        if self.data.size != 1:
            raise GraphError("backward() needs a scalar output")
        if self._consumed:
            raise GraphError("backward() already called on this graph; run a new forward pass")
        if self._backward is None:
            raise GraphError("no recorded forward pass requires a gradient")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            # release the closure; the graph is single-use
            node._backward = None
            node._parents = ()
        self._consumed = True


class Parameter(Tensor):
    """A trainable leaf tensor. Frozen parameters never receive gradients."""

    __slots__ = ("frozen", "name")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# numpy kernels (forward only); used directly by the oracles in the tests too


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` [N,C,H,W] with ``w`` [O,C,kH,kW]."""
    return _conv2d_cols(x, w, stride, padding)[0]


def _conv2d_cols(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (padding {padding})")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    # im2col, channel-major: cols[n, (c, i, j), (y, x)] = xpad[n, c, y*s + i, x*s + j]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)
    return out, cols, (n, c, h, wd, ho, wo)


def maxpool2d_forward(x: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; returns the output and the flat argmax (row-major, first max wins)."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(ho)[:, None] * stride + di
    cols_ = np.arange(wo)[None, :] * stride + dj
    index = rows * w + cols_
    return np.ascontiguousarray(out), index


# ---------------------------------------------------------------------------
# differentiable ops


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    out, cols, (n, c, h, w, ho, wo) = _conv2d_cols(x.data, weight.data, stride, padding)
    o, _, kh, kw = weight.shape
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    need_x = x.requires_grad

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if need_x:
            dcols = np.matmul(weight.data.reshape(o, -1).T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    out, index = maxpool2d_forward(x.data, window, stride)
    n, c, h, w = x.shape

    def backward(g):
        gx = np.zeros((n, c, h * w))
        idx = index.reshape(n, c, -1)
        gv = g.reshape(n, c, -1)
        if stride >= window:
            # windows do not overlap, so every index is unique per (n, c)
            np.put_along_axis(gx, idx, gv, axis=-1)
        else:
            nn_, cc = np.indices(idx.shape[:2])
            np.add.at(gx, (nn_[..., None], cc[..., None], idx), gv)
        return (gx.reshape(n, c, h, w),)

    return _result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fc input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"fc bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


# ---------------------------------------------------------------------------
# losses


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not line up")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    n = logits.shape[0]
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss), (logits,), backward)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse needs equal shapes, got {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    m = diff.size

    def backward(g):
        d = diff * (2.0 * g / m)
        return d, -d

    return _result(np.asarray((diff * diff).mean()), (pred, target), backward)
