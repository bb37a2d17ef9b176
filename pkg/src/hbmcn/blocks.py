"""Composite layers: SE gate, residual bottleneck, SE-Res module and heads.

Each layer class owns its :class:`Parameter` objects and running buffers and
exposes them through ``named_parameters`` / ``named_buffers`` with dotted
names, so a model is just a tree of these objects.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor


class Parameter(Tensor):
    """A trainable tensor.

    ``decay`` says whether weight decay applies; ``lr_mult`` scales the
    learning rate (10 for newly added parts of the network).
    """

    __slots__ = ("decay", "lr_mult")

    def __init__(self, data, decay: bool = True, lr_mult: float = 1.0):
        super().__init__(data, requires_grad=True)
        self.decay = decay
        self.lr_mult = lr_mult


def init_params(kind: str, shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Initial values for a layer tensor.

    ``"conv"`` and ``"linear"`` weights are drawn from N(0, 2/fan_in) where
    fan_in is the product of all but the first axis; ``"bn_gamma"`` is ones,
    ``"bn_beta"`` and ``"bias"`` are zeros.
    """
    shape = tuple(int(s) for s in shape)
    if kind in ("conv", "linear"):
        fan_in = int(np.prod(shape[1:]))
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    if kind == "bn_gamma":
        return np.ones(shape, dtype=dtype)
    if kind in ("bn_beta", "bias"):
        return np.zeros(shape, dtype=dtype)
    raise ValueError(f"unknown parameter kind {kind!r}")


class Layer:
    """Base class: walks attributes to find parameters, buffers and sublayers."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Layer)):
                yield key, value
            elif isinstance(value, list) and value and isinstance(value[0], Layer):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            elif isinstance(value, dict):
                for sub, item in value.items():
                    if isinstance(item, Layer):
                        yield f"{key}.{sub}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            if isinstance(value, Layer):
                yield from value.named_buffers(f"{prefix}{key}.")

    def layers(self) -> Iterator["Layer"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Layer):
                yield from value.layers()

    def set_lr_mult(self, mult: float) -> None:
        for _, p in self.named_parameters():
            p.lr_mult = mult


class Conv(Layer):
    def __init__(self, cin: int, cout: int, k: int, rng, stride: int = 1, pad: int = 0, bias: bool = False, dtype=np.float32):
        self.weight = Parameter(init_params("conv", (cout, cin, k, k), rng, dtype))
        self.bias = Parameter(init_params("bias", (cout,), rng, dtype), decay=False) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Layer):
    def __init__(self, c: int, rng=None, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Parameter(init_params("bn_gamma", (c,), rng, dtype), decay=False)
        self.beta = Parameter(init_params("bn_beta", (c,), rng, dtype), decay=False)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return ag.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class SEBlock(Layer):
    """Squeeze (spatial mean) and excitation (two bias-free linear maps) gate."""

    def __init__(self, c: int, r: int, rng, dtype=np.float32):
        if r < 1 or c % r:
            raise DimensionError(f"SE reduction ratio {r} does not divide {c} channels")
        self.w1 = Parameter(init_params("linear", (c // r, c), rng, dtype))
        self.w2 = Parameter(init_params("linear", (c, c // r), rng, dtype))
        self.r = r

    def gate(self, y: Tensor) -> Tensor:
        z = ag.gap(y)
        return ag.sigmoid(ag.linear(ag.relu(ag.linear(z, self.w1)), self.w2))

    def __call__(self, y: Tensor) -> Tensor:
        return se_block(y, self)


def se_block(y: Tensor, p: SEBlock) -> Tensor:
    if y.data.ndim != 4 or y.shape[1] != p.w1.shape[1]:
        raise DimensionError(f"SE block built for {p.w1.shape[1]} channels, got {y.shape}")
    return ag.scale_channels(y, p.gate(y))


class Bottleneck(Layer):
    """1×1 reduce, 3×3, 1×1 expand (×4) with batch norm; optional SE gate.

    The stride sits on the first 1×1 convolution. A projection skip (1×1
    conv + BN) is created whenever the block changes shape.
    """

    expansion = 4

    def __init__(self, cin: int, width: int, rng, stride: int = 1, se_ratio: Optional[int] = None, dtype=np.float32):
        cout = width * self.expansion
        self.conv1 = Conv(cin, width, 1, rng, stride=stride, dtype=dtype)
        self.bn1 = BatchNorm(width, dtype=dtype)
        self.conv2 = Conv(width, width, 3, rng, pad=1, dtype=dtype)
        self.bn2 = BatchNorm(width, dtype=dtype)
        self.conv3 = Conv(width, cout, 1, rng, dtype=dtype)
        self.bn3 = BatchNorm(cout, dtype=dtype)
        self.se = SEBlock(cout, se_ratio, rng, dtype) if se_ratio else None
        if stride != 1 or cin != cout:
            self.proj = Conv(cin, cout, 1, rng, stride=stride, dtype=dtype)
            self.proj_bn = BatchNorm(cout, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None
        self.cin, self.cout, self.stride = cin, cout, stride

    def residual(self, x: Tensor) -> Tensor:
        y = ag.relu(self.bn1(self.conv1(x)))
        y = ag.relu(self.bn2(self.conv2(y)))
        return self.bn3(self.conv3(y))

    def skip(self, x: Tensor) -> Tensor:
        return x if self.proj is None else self.proj_bn(self.proj(x))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.cin:
            raise DimensionError(f"block expects {self.cin} input channels, got {x.shape}")
        y = self.residual(x)
        if self.se is not None:
            y = se_block(y, self.se)
        s = self.skip(x)
        if s.shape != y.shape:
            raise DimensionError(f"residual {y.shape} and skip {s.shape} disagree")
        return ag.relu(ag.add(y, s))


def bottleneck(x: Tensor, p: Bottleneck) -> Tensor:
    return p(x)


def se_res_module(x: Tensor, p: Bottleneck) -> Tensor:
    if p.se is None:
        raise ValueError("block has no SE gate")
    return p(x)


class ReductionHead(Layer):
    """Pooled feature -> 1×1 conv -> BN -> leaky ReLU(0.1)."""

    def __init__(self, cin: int, width: int, rng, dtype=np.float32):
        self.conv = Conv(cin, width, 1, rng, dtype=dtype)
        self.bn = BatchNorm(width, dtype=dtype)
        self.cin = cin
        self.width = width

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 2:
            x = ag.reshape(x, (x.shape[0], x.shape[1], 1, 1))
        if x.shape[1:] != (self.cin, 1, 1):
            raise DimensionError(f"reduction head expects N×{self.cin}×1×1, got {x.shape}")
        f = ag.leaky_relu(self.bn(self.conv(x)), 0.1)
        return ag.reshape(f, (f.shape[0], self.width))


class ClassifierHead(Layer):
    """1×1 conv with bias from the reduced feature to identity logits."""

    def __init__(self, width: int, num_classes: int, rng, dtype=np.float32):
        self.conv = Conv(width, num_classes, 1, rng, bias=True, dtype=dtype)
        self.width = width
        self.num_classes = num_classes

    def __call__(self, f: Tensor) -> Tensor:
        if f.data.ndim != 2 or f.shape[1] != self.width:
            raise DimensionError(f"classifier expects N×{self.width}, got {f.shape}")
        out = self.conv(ag.reshape(f, (f.shape[0], self.width, 1, 1)))
        return ag.reshape(out, (f.shape[0], self.num_classes))


def reduction_head(x: Tensor, p: ReductionHead) -> Tensor:
    return p(x)


def classifier_head(f: Tensor, p: ClassifierHead) -> Tensor:
    return p(f)
