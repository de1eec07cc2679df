"""Generator (compact U-Net disparity head) and the twin patch discriminators."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LEAKY_GAIN = 1.0 / np.sqrt(1.0 + dc.LEAKY_SLOPE**2)

# layer-index offsets so the three networks never share a seed stream
_SEED_OFFSETS = {"G": 0, "D_L": 1000, "D_R": 2000}


@dataclass(frozen=True)
class ArchSpec:
    enc_channels: tuple[int, ...] = (32, 64, 128, 256)
    dec_out_channels: int = 16
    disc_channels: tuple[int, ...] = (32, 64, 128, 256)
    in_channels: int = 3

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            enc_channels=tuple(d["enc_channels"]),
            dec_out_channels=int(d["dec_out_channels"]),
            disc_channels=tuple(d["disc_channels"]),
            in_channels=int(d["in_channels"]),
        )


class ParamSet:
    """Ordered name -> Tensor mapping for one network."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def names(self) -> list[str]:
        return list(self.tensors)

    def detached(self) -> "ParamSet":
        """Read-only view for forward passes that must not touch these grads."""
        return ParamSet(OrderedDict((k, Tensor(v.data)) for k, v in self.tensors.items()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def copy(self) -> "ParamSet":
        return ParamSet(OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.tensors.items()))

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)) for k, v in self.tensors.items()))


@dataclass
class Models:
    G: ParamSet
    D_L: ParamSet
    D_R: ParamSet
    arch: ArchSpec

    def nets(self) -> "OrderedDict[str, ParamSet]":
        return OrderedDict([("G", self.G), ("D_L", self.D_L), ("D_R", self.D_R)])


def _conv_layers_generator(arch: ArchSpec) -> list[tuple[str, int, int, int]]:
    """(name, cout, cin, k) for every generator conv, in forward order."""
    layers = []
    cin = arch.in_channels
    for i, c in enumerate(arch.enc_channels, start=1):
        layers.append((f"enc{i}.down", c, cin, 3))
        layers.append((f"enc{i}.conv", c, c, 3))
        cin = c
    enc = arch.enc_channels
    skips = (arch.in_channels,) + enc[:-1]
    outs = enc[:-1][::-1] + (arch.dec_out_channels,)
    level = len(enc)
    for skip, cout in zip(skips[::-1], outs):
        layers.append((f"dec{level}.conv", cout, cin + skip, 3))
        cin = cout
        level -= 1
    layers.append(("head", 1, cin, 3))
    return layers


def _conv_layers_discriminator(arch: ArchSpec) -> list[tuple[str, int, int, int]]:
    layers = []
    cin = arch.in_channels
    for i, c in enumerate(arch.disc_channels, start=1):
        layers.append((f"block{i}", c, cin, 4))
        cin = c
    layers.append(("head", 1, cin, 3))
    return layers


def _init_net(layers, seed: int, offset: int, dtype) -> ParamSet:
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for idx, (name, cout, cin, k) in enumerate(layers):
        rng = np.random.default_rng([seed, offset + idx])
        fan_in = cin * k * k
        bound = LEAKY_GAIN * np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        tensors[f"{name}.weight"] = Tensor(w, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return ParamSet(tensors)


def init_params(seed: int, arch: ArchSpec = ArchSpec(), dtype=np.float32) -> Models:
    """He-uniform weights (leaky-ReLU gain), zero biases, seeded per (seed, layer)."""
    return Models(
        G=_init_net(_conv_layers_generator(arch), seed, _SEED_OFFSETS["G"], dtype),
        D_L=_init_net(_conv_layers_discriminator(arch), seed, _SEED_OFFSETS["D_L"], dtype),
        D_R=_init_net(_conv_layers_discriminator(arch), seed, _SEED_OFFSETS["D_R"], dtype),
        arch=arch,
    )


def weight_bound(fan_in: int) -> float:
    return float(LEAKY_GAIN * np.sqrt(6.0 / fan_in))


def _conv(x: Tensor, p: ParamSet, name: str, stride: int, padding: int) -> Tensor:
    return dc.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding)


def generator_forward(center: Tensor, params: ParamSet, d_max: float, arch: ArchSpec = ArchSpec()) -> Tensor:
    """Center image [B,3,H,W] -> disparity [B,1,H,W] in (0, d_max)."""
    if center.data.ndim != 4 or center.shape[1] != arch.in_channels:
        raise ValueError(f"generator expects [B,{arch.in_channels},H,W], got {center.shape}")
    levels = len(arch.enc_channels)
    h, w = center.shape[2:]
    if h % (2**levels) or w % (2**levels):
        raise ValueError(f"generator input size {h}x{w} must be a multiple of {2**levels}")

    skips = [center]
    x = center
    for i in range(1, levels + 1):
        x = dc.leaky_relu(_conv(x, params, f"enc{i}.down", 2, 1))
        x = dc.leaky_relu(_conv(x, params, f"enc{i}.conv", 1, 1))
        skips.append(x)
    skips.pop()  # deepest feature map is x itself
    for level in range(levels, 0, -1):
        x = dc.upsample_nearest2x(x)
        x = dc.concat_channels(x, skips.pop())
        x = dc.leaky_relu(_conv(x, params, f"dec{level}.conv", 1, 1))
    x = dc.sigmoid(_conv(x, params, "head", 1, 1))
    return dc.scale_shift(x, d_max, 0.0)


def discriminator_forward(image: Tensor, params: ParamSet, arch: ArchSpec = ArchSpec()) -> Tensor:
    """Image [B,3,H,W] -> probability per batch item, shape [B]."""
    if image.data.ndim != 4 or image.shape[1] != arch.in_channels:
        raise ValueError(f"discriminator expects [B,{arch.in_channels},H,W], got {image.shape}")
    levels = len(arch.disc_channels)
    h, w = image.shape[2:]
    if h % (2**levels) or w % (2**levels):
        raise ValueError(f"discriminator input size {h}x{w} must be a multiple of {2**levels}")
    x = image
    for i in range(1, levels + 1):
        x = dc.leaky_relu(_conv(x, params, f"block{i}", 2, 1))
    x = dc.sigmoid(_conv(x, params, "head", 1, 1))
    return dc.batch_mean(x)
