"""Generator and discriminator constructors, parameter counts, topology.

All four generator variants share one nested grid of nodes ``(m, n)``:
``m`` is the resolution row (0 = full resolution), ``n`` the position along
that row's skip pathway.

* nested variants (UNETPP, FDUNETPP) instantiate every node with
  ``m + n <= L``; node ``(m, n>0)`` consumes the ``n`` earlier nodes of its
  row plus an upsampled copy of ``(m+1, n-1)``.
* plain variants (UNET, FDUNET) keep only the encoder column ``(m, 0)`` and
  the decoder diagonal ``(m, L-m)``, i.e. one skip edge per row.

Plain variants use double 3x3 convolutions as node blocks; the FD variants
use a 1x1 (3x3 for the stem) transition to ``f_l`` channels followed by a
four-layer dense block with growth ``k_l``.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .layers import (
    Conv2d,
    Conv2dSpec,
    ConvBNReLU,
    ConvTranspose2d,
    DenseBlock,
    DenseBlockSpec,
    InstanceNorm2d,
    Module,
)


class Arch(str, enum.Enum):
    UNET = "unet"
    UNETPP = "unetpp"
    FDUNET = "fdunet"
    FDUNETPP = "fdunetpp"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown arch {value!r}; expected one of {[a.value for a in cls]}"
            ) from None

    @property
    def nested(self):
        return self in (Arch.UNETPP, Arch.FDUNETPP)

    @property
    def dense(self):
        return self in (Arch.FDUNET, Arch.FDUNETPP)


# Reference configurations for the parameter-count comparison.  FD variants
# use (k1, f1) = (8, 64), chosen by ``calibrate_dense_variants`` (see README);
# plain variants use f1 = 32.
REFERENCE_PARAMS = {
    Arch.UNET: 7.8e6,
    Arch.UNETPP: 9.0e6,
    Arch.FDUNET: 13.0e6,
    Arch.FDUNETPP: 18.8e6,
}
REFERENCE_GAN_TOTAL = 22.8e6


@dataclass
class GeneratorConfig:
    arch: Arch = Arch.FDUNETPP
    levels: int = 4
    k1: int = 8
    f1: int = 64
    in_channels: int = 1
    out_channels: int = 1
    dense_layers: int = 4
    bottleneck_factor: int = 4

    def __post_init__(self):
        self.arch = Arch.parse(self.arch)
        for name in ("levels", "k1", "f1", "in_channels", "out_channels", "dense_layers", "bottleneck_factor"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"GeneratorConfig.{name} must be >= 1, got {getattr(self, name)}")

    def growth(self, level):
        return 2 ** (level - 1) * self.k1

    def features(self, level):
        return 2 ** (level - 1) * self.f1

    def schedule(self):
        """(level, k_l, f_l) for the L encoder levels and the bottleneck."""
        return [(l, self.growth(l), self.features(l)) for l in range(1, self.levels + 2)]

    def to_dict(self):
        d = asdict(self)
        d["arch"] = self.arch.value
        return d


def reference_generator_config(arch) -> GeneratorConfig:
    arch = Arch.parse(arch)
    if arch.dense:
        return GeneratorConfig(arch=arch, k1=8, f1=64)
    return GeneratorConfig(arch=arch, f1=32)


@dataclass
class DiscriminatorConfig:
    num_layers: int = 6
    base_channels: int = 64
    in_channels: int = 2
    out_channels: int = 3
    kernel: int = 4
    norm: str = "instance"

    def __post_init__(self):
        if self.num_layers != 6:
            raise ValueError("the patch discriminator has exactly six convolutional layers")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"invalid discriminator config {self}")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"norm must be 'instance' or 'none', got {self.norm!r}")

    def channels(self):
        b = self.base_channels
        return [b, 2 * b, 4 * b, 8 * b, 8 * b, self.out_channels]

    def strides(self):
        return [2, 2, 2, 2, 1, 1]

    def to_dict(self):
        return asdict(self)


@dataclass
class Edge:
    source: tuple | str
    kind: str  # "input", "down", "skip", "up"
    channels: int
    offset: int


@dataclass
class NodeInfo:
    m: int
    n: int
    in_channels: int
    out_channels: int
    features: int
    growth: int | None
    inputs: list = field(default_factory=list)

    @property
    def in_degree(self):
        return len(self.inputs)


class _PlainNode(Module):
    def __init__(self, in_ch, feats, rng, dtype):
        super().__init__()
        self.conv1 = ConvBNReLU(Conv2dSpec(in_ch, feats, 3, 1, 1), rng, dtype)
        self.conv2 = ConvBNReLU(Conv2dSpec(feats, feats, 3, 1, 1), rng, dtype)
        self.out_channels = feats

    def forward(self, x):
        return self.conv2(self.conv1(x))


class _DenseNode(Module):
    def __init__(self, in_ch, feats, growth, n_layers, bottleneck, stem, rng, dtype):
        super().__init__()
        k = 3 if stem else 1
        self.transition = ConvBNReLU(Conv2dSpec(in_ch, feats, k, 1, k // 2), rng, dtype)
        self.block = DenseBlock(DenseBlockSpec(feats, growth, n_layers, bottleneck), rng, dtype)
        self.out_channels = self.block.out_channels

    def forward(self, x):
        return self.block(self.transition(x))


def node_set(arch, levels):
    arch = Arch.parse(arch)
    if arch.nested:
        return [(m, n) for n in range(levels + 1) for m in range(levels + 1 - n)]
    enc = [(m, 0) for m in range(levels + 1)]
    dec = [(m, levels - m) for m in range(levels - 1, -1, -1)]
    return enc + dec


class Generator(Module):
    """Image-to-image encoder/decoder ending in a 1x1 conv and sigmoid."""

    def __init__(self, cfg: GeneratorConfig, seed=0, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        L = cfg.levels
        self.order = node_set(cfg.arch, L)
        present = set(self.order)
        self.nodes = {}
        self.ups = {}
        self.info = {}
        for m, n in self.order:
            level = m + 1
            feats = cfg.features(level)
            edges = []
            offset = 0
            if n == 0:
                if m == 0:
                    edges.append(Edge("input", "input", cfg.in_channels, 0))
                    offset = cfg.in_channels
                else:
                    ch = self.info[(m - 1, 0)].out_channels
                    edges.append(Edge((m - 1, 0), "down", ch, 0))
                    offset = ch
            else:
                for k in range(n):
                    if (m, k) in present:
                        ch = self.info[(m, k)].out_channels
                        edges.append(Edge((m, k), "skip", ch, offset))
                        offset += ch
                below = (m + 1, n - 1)
                self.ups[(m, n)] = ConvTranspose2d(
                    self.info[below].out_channels, feats, rng=rng, dtype=dtype
                )
                edges.append(Edge(below, "up", feats, offset))
                offset += feats
            in_ch = offset
            if cfg.arch.dense:
                growth = cfg.growth(level)
                block = _DenseNode(
                    in_ch, feats, growth, cfg.dense_layers, cfg.bottleneck_factor * growth,
                    stem=(m, n) == (0, 0), rng=rng, dtype=dtype,
                )
            else:
                growth = None
                block = _PlainNode(in_ch, feats, rng, dtype)
            self.nodes[(m, n)] = block
            self.info[(m, n)] = NodeInfo(m, n, in_ch, block.out_channels, feats, growth, edges)
        self.final_node = (0, L)
        self.head = Conv2d(
            Conv2dSpec(self.info[self.final_node].out_channels, cfg.out_channels, 1, 1, 0), rng, dtype
        )

    def forward(self, x):
        L = self.cfg.levels
        _, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ad.ShapeError(f"generator expects {self.cfg.in_channels} channels, got {c}")
        if h % (2 ** L) or w % (2 ** L):
            raise ad.ShapeError(f"input size {h}x{w} not divisible by 2^{L}")
        out = {}
        for key in self.order:
            info = self.info[key]
            parts = []
            for e in info.inputs:
                if e.kind == "input":
                    parts.append(x)
                elif e.kind == "down":
                    parts.append(ad.maxpool2x2(out[e.source]))
                elif e.kind == "skip":
                    parts.append(out[e.source])
                else:
                    parts.append(self.ups[key](out[e.source]))
            inp = parts[0] if len(parts) == 1 else ad.concat(parts)
            out[key] = self.nodes[key](inp)
        return ad.sigmoid(self.head(out[self.final_node]))


class PatchDiscriminator(Module):
    """Six 4x4 convolutions; instance norm + ReLU after all but the last."""

    def __init__(self, cfg: DiscriminatorConfig, seed=0, dtype=ad.DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.convs = []
        self.norms = []
        prev = cfg.in_channels
        chans = cfg.channels()
        for i, (ch, stride) in enumerate(zip(chans, cfg.strides())):
            self.convs.append(Conv2d(Conv2dSpec(prev, ch, cfg.kernel, stride, 1), rng, dtype))
            if i < len(chans) - 1 and cfg.norm == "instance":
                self.norms.append(InstanceNorm2d(ch, dtype))
            prev = ch

    def channel_sequence(self):
        return [c.spec.out_channels for c in self.convs]

    def output_size(self, h, w):
        for conv in self.convs:
            h, w = conv.spec.output_size(h, w)
        return h, w

    def forward(self, pair):
        h, w = self.output_size(pair.shape[2], pair.shape[3])
        if h < 1 or w < 1:
            raise ad.ShapeError(
                f"discriminator input {pair.shape[2]}x{pair.shape[3]} too small for six layers"
            )
        x = pair
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < last:
                if self.norms:
                    x = self.norms[i](x)
                x = ad.relu(x)
        return x


def build_generator(cfg: GeneratorConfig, seed=0, dtype=ad.DEFAULT_DTYPE) -> Generator:
    return Generator(cfg, seed=seed, dtype=dtype)


def build_discriminator(cfg: DiscriminatorConfig, seed=0, dtype=ad.DEFAULT_DTYPE) -> PatchDiscriminator:
    return PatchDiscriminator(cfg, seed=seed, dtype=dtype)


def count_parameters(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def inspect_topology(model: Generator) -> list[NodeInfo]:
    """Every node of the generator grid, ordered by (n, m)."""
    return [model.info[k] for k in sorted(model.info, key=lambda k: (k[1], k[0]))]


def calibrate_dense_variants(k_values=range(8, 17), f_values=range(4, 65, 4), disc_params=None):
    """Sweep shared (k1, f1) for FDUNET/FDUNETPP against the reference counts.

    Candidates are ranked by the worst relative deviation among FDUNETPP,
    FDUNET and FDUNETPP + discriminator.  Returns ``(worst, k1, f1, counts)``
    tuples, best first.
    """
    if disc_params is None:
        disc_params = count_parameters(PatchDiscriminator(DiscriminatorConfig()))
    rows = []
    for k1 in k_values:
        for f1 in f_values:
            pp = count_parameters(Generator(GeneratorConfig(arch=Arch.FDUNETPP, k1=k1, f1=f1)))
            fd = count_parameters(Generator(GeneratorConfig(arch=Arch.FDUNET, k1=k1, f1=f1)))
            devs = (
                pp / REFERENCE_PARAMS[Arch.FDUNETPP] - 1,
                fd / REFERENCE_PARAMS[Arch.FDUNET] - 1,
                (pp + disc_params) / REFERENCE_GAN_TOTAL - 1,
            )
            rows.append((max(abs(d) for d in devs), k1, f1, {"fdunetpp": pp, "fdunet": fd}))
    rows.sort(key=lambda r: r[:3])
    return rows
