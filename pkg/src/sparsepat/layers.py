"""Layer modules built on the autodiff core.

Modules own their parameters as :class:`~sparsepat.autodiff.Tensor` leaves
and expose them through ``named_parameters`` in a deterministic order, which
is what checkpoints and parameter counting rely on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_EPS = 1e-5


class Module:
    def __init__(self):
        self.training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{_key(k)}", v

    def _own_parameters(self):
        return []

    def _own_buffers(self):
        return []

    def named_parameters(self, prefix=""):
        for name, p in self._own_parameters():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self._own_buffers():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _key(k):
    if isinstance(k, tuple):
        return "_".join(str(i) for i in k)
    return str(k)


def _he_normal(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be positive: {self.in_channels}->{self.out_channels}")
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))

    def output_size(self, h, w):
        kh, kw = self.kernel
        return (
            ad.conv_output_size(h, kh, self.stride, self.padding),
            ad.conv_output_size(w, kw, self.stride, self.padding),
        )

    def num_parameters(self):
        kh, kw = self.kernel
        return self.out_channels * self.in_channels * kh * kw + (self.out_channels if self.bias else 0)


class Conv2d(Module):
    def __init__(self, spec: Conv2dSpec, rng=None, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = spec.kernel
        fan_in = spec.in_channels * kh * kw
        self.weight = Tensor(
            _he_normal(rng, (spec.out_channels, spec.in_channels, kh, kw), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True) if spec.bias else None

    def _own_parameters(self):
        ps = [("weight", self.weight)]
        if self.bias is not None:
            ps.append(("bias", self.bias))
        return ps

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ad.ShapeError(
                f"conv2d: input has {x.shape[1]} channels, layer expects {self.spec.in_channels}"
            )
        return ad.conv2d(x, self.weight, self.bias, stride=self.spec.stride, padding=self.spec.padding)


class ConvTranspose2d(Module):
    """Upsampling layer; default 2x2 kernel, stride 2 doubles spatial dims."""

    def __init__(self, in_channels, out_channels, kernel=2, stride=2, padding=0, rng=None,
                 dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.stride, self.padding = stride, padding
        self.weight = Tensor(
            _he_normal(rng, (in_channels, out_channels, kernel, kernel), in_channels * kernel * kernel, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype), requires_grad=True)

    def _own_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def _own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def _own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=NORM_EPS,
        )


class InstanceNorm2d(Module):
    def __init__(self, channels, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)

    def _own_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x):
        return ad.instance_norm(x, self.gamma, self.beta, eps=NORM_EPS)


class ConvBNReLU(Module):
    def __init__(self, spec: Conv2dSpec, rng=None, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.conv = Conv2d(spec, rng, dtype)
        self.bn = BatchNorm2d(spec.out_channels, dtype=dtype)

    @property
    def in_channels(self):
        return self.conv.spec.in_channels

    @property
    def out_channels(self):
        return self.conv.spec.out_channels

    def forward(self, x):
        return ad.relu(self.bn(self.conv(x)))


@dataclass(frozen=True)
class DenseBlockSpec:
    """Channel bookkeeping for a dense block.

    Layer ``i`` (1-indexed) sees ``F + k*(i-1)`` channels and emits ``k``;
    the block returns its input concatenated with every layer output.
    """

    input_channels: int
    growth_rate: int
    num_layers: int = 4
    bottleneck_width: int | None = None

    def __post_init__(self):
        if self.input_channels < 1 or self.growth_rate < 1 or self.num_layers < 1:
            raise ValueError(f"invalid dense block spec {self}")
        if self.bottleneck_width is None:
            object.__setattr__(self, "bottleneck_width", 4 * self.growth_rate)

    def layer_input_channels(self, i):
        return self.input_channels + self.growth_rate * (i - 1)

    @property
    def output_channels(self):
        return self.input_channels + self.num_layers * self.growth_rate


class DenseLayer(Module):
    """1x1 conv -> BN -> ReLU -> 3x3 conv -> BN -> ReLU."""

    def __init__(self, in_channels, growth_rate, bottleneck_width, rng=None, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.reduce = ConvBNReLU(Conv2dSpec(in_channels, bottleneck_width, 1, 1, 0), rng, dtype)
        self.grow = ConvBNReLU(Conv2dSpec(bottleneck_width, growth_rate, 3, 1, 1), rng, dtype)

    @property
    def in_channels(self):
        return self.reduce.in_channels

    def forward(self, x):
        return self.grow(self.reduce(x))


class DenseBlock(Module):
    def __init__(self, spec: DenseBlockSpec, rng=None, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.spec = spec
        self.layers = [
            DenseLayer(spec.layer_input_channels(i), spec.growth_rate, spec.bottleneck_width, rng, dtype)
            for i in range(1, spec.num_layers + 1)
        ]

    @property
    def out_channels(self):
        return self.spec.output_channels

    def forward(self, x):
        if x.shape[1] != self.spec.input_channels:
            raise ad.ShapeError(
                f"dense_block: input has {x.shape[1]} channels, block expects {self.spec.input_channels}"
            )
        feats = x
        for layer in self.layers:
            feats = ad.concat([feats, layer(feats)])
        return feats


def dense_block(x: Tensor, spec: DenseBlockSpec, rng=None) -> Tensor:
    """Functional form: build a freshly initialized block and apply it."""
    return DenseBlock(spec, rng, x.dtype)(x)
