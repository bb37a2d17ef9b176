"""Dense tensors with reverse-mode differentiation.

Only the handful of operations the network needs are provided. Every op is a
plain function that takes :class:`Tensor` inputs, computes its result with
numpy and records a closure that maps the output gradient back to the
inputs. :func:`backward` replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# names of deliberately broken backward rules, used by the gradcheck mutation test
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Temporarily corrupt a backward rule (``"conv2d"`` flips the sign of dx)."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


# when a list, piecewise ops append their branch choice (sign mask or argmax)
_BRANCH_LOG: Optional[list] = None


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch decisions of relu, leaky_relu and max_pool.

    Two forward passes that record equal lists ran through the same linear
    piece of the network, so a finite difference between them is valid.
    """
    global _BRANCH_LOG
    outer, _BRANCH_LOG = _BRANCH_LOG, []
    try:
        yield _BRANCH_LOG
    finally:
        _BRANCH_LOG = outer


def _log_branch(decision: np.ndarray) -> None:
    if _BRANCH_LOG is not None:
        _BRANCH_LOG.append(decision.copy())


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


def _result(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every tensor that requires it with d(root)/d(tensor).

    Gradients accumulate additively, so call ``zero_grad`` on leaves between steps.
    """
    if root.data.size != 1:
        raise GraphError("backward needs a scalar root")
    if not root.requires_grad:
        raise GraphError("root has no recorded graph; run a forward pass on tensors that require grad")

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    mask = x.data >= 0
    _log_branch(mask)
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    t = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(t))
    out = np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def pointwise(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.1)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def scale_channels(y: Tensor, s: Tensor) -> Tensor:
    """Multiply every map ``y[n, c]`` by the scalar ``s[n, c]``."""
    if y.data.ndim != 4 or s.shape != y.shape[:2]:
        raise DimensionError(f"scale_channels: {y.shape} vs gate {s.shape}")
    s4 = s.data[:, :, None, None]

    def fn(g):
        return g * s4, np.einsum("nchw,nchw->nc", g, y.data)

    return _result(y.data * s4, (y, s), fn, "scale_channels")


# ---------------------------------------------------------------------------
# convolution, pooling, normalization


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    if stride < 1 or pad < 0:
        raise DimensionError("stride must be positive and pad non-negative")
    if size + 2 * pad < k:
        raise DimensionError(f"window {k} larger than padded extent {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation, N×Cin×H×W with Cout×Cin×kh×kw."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(wd, kw, stride, pad)
    k = cin * kh * kw
    w2 = w.data.reshape(cout, k)

    pointwise_conv = kh == 1 and kw == 1 and pad == 0
    if pointwise_conv:
        xs = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs).reshape(n, k, ho * wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols6 = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols6.reshape(n, k, ho * wo)

    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def fn(g):
        g3 = g.reshape(n, cout, ho * wo)
        dw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if w.requires_grad else None
        db = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3)
            if pointwise_conv:
                if stride == 1:
                    dx = dcols.reshape(x.shape)
                else:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = dcols.reshape(n, cin, ho, wo)
            else:
                dcols6 = dcols.reshape(n, cin, kh, kw, ho, wo)
                dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols6[:, :, i, j]
                dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
            if "conv2d" in _FAULTS:
                dx = -dx
        return dx, dw, db

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, fn, "conv2d")


def max_pool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Windowed maximum; the gradient goes to the first maximal element of each window."""
    if x.data.ndim != 4:
        raise DimensionError("max_pool expects 4-D input")
    n, c, h, wd = x.shape
    ho = _out_size(h, k, stride, pad)
    wo = _out_size(wd, k, stride, pad)
    if pad:
        xp = np.full((n, c, h + 2 * pad, wd + 2 * pad), -np.inf, dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + wd] = x.data
    else:
        xp = x.data
    windows = np.empty((k * k, n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            windows[i * k + j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    arg = windows.argmax(axis=0)
    _log_branch(arg)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def fn(g):
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == i * k + j, g, 0)
        return (dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp,)

    return _result(out, (x,), fn, "max_pool")


def gap(x: Tensor) -> Tensor:
    """Global average pooling, N×C×H×W -> N×C."""
    if x.data.ndim != 4:
        raise DimensionError("gap expects 4-D input")
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))

    def fn(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).astype(x.dtype),)

    return _result(out, (x,), fn, "gap")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization of an N×C×H×W tensor.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with weight ``momentum``).
    """
    if x.data.ndim != 4:
        raise DimensionError("batch_norm expects 4-D input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: affine params must have shape ({c},)")
    m = n * h * w
    gb = gamma.data[None, :, None, None]
    if training:
        if m < 2:
            raise DimensionError("batch_norm: degenerate batch, need at least 2 values per channel in train mode")
        mean = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean = running_mean
        var = running_var
        xc = x.data - mean[None, :, None, None].astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gb + beta.data[None, :, None, None]

    def fn(g):
        dgamma = np.einsum("nchw,nchw->c", g, xhat) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gb
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = np.einsum("nchw,nchw->c", dxhat, xhat)[None, :, None, None]
                dx = (dxhat - s1 / m - xhat * (s2 / m)) * inv_std[None, :, None, None]
            else:
                dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), fn, "batch_norm")


# ---------------------------------------------------------------------------
# dense layers and loss


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x·Wᵀ + b for x of shape N×D and W of shape D'×D."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def fn(g):
        dx = g @ w.data if x.requires_grad else None
        dw = g.T @ x.data if w.requires_grad else None
        db = g.sum(axis=0) if b is not None else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, fn, "linear")


def softmax_log_loss(logits: Tensor, labels, reduction: str = "sum") -> Tensor:
    """Negative log softmax probability of the true class, summed over the batch.

    ``reduction="mean"`` divides by the batch size instead.
    """
    if logits.data.ndim != 2:
        raise DimensionError("softmax_log_loss expects B×C logits")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise DimensionError(f"{labels.shape[0]} labels for batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(b), labels]
    scale = 1.0 / b if reduction == "mean" else 1.0
    loss = np.asarray((lse - picked).sum() * scale, dtype=logits.dtype)

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), labels] -= 1
        return ((p * (g * scale)).astype(logits.dtype),)

    return _result(loss, (logits,), fn, "softmax_log_loss")
