"""Decomposition U-Net, enhancement U-Net and the noise/color-bias feature CNN.

Networks are plain ordered ``name -> tensor`` parameter maps plus pure
forward functions, which keeps checkpointing and freezing trivial.
"""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import autodiff as ad

Tensor = torch.Tensor


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int
    base_channels: int = 16
    depth: int = 4
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("U-Net depth must be >= 1")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** k for k in range(self.depth)]


@dataclass(frozen=True)
class NCBCConfig:
    layers: int = 5
    feat_channels: int = 32
    hidden_channels: int = 32
    in_channels: int = 3
    kernel: int = 3

    def __post_init__(self):
        if self.layers < 3:
            raise ValueError("the feature CNN needs at least 3 layers")


def decom_config(base_channels: int = 16, depth: int = 4) -> UNetConfig:
    return UNetConfig(3, 4, base_channels, depth)


def enhance_config(base_channels: int = 16, depth: int = 4) -> UNetConfig:
    return UNetConfig(4, 1, base_channels, depth)


def _conv_shapes(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    c = cfg.widths()
    layers = [("enc0.conv_a", cfg.in_channels, c[0]), ("enc0.conv_b", c[0], c[0])]
    for k in range(1, cfg.depth):
        layers += [(f"enc{k}.down", c[k - 1], c[k]), (f"enc{k}.conv", c[k], c[k])]
    for k in range(cfg.depth - 2, -1, -1):
        layers += [(f"dec{k}.up", c[k + 1], c[k]),
                   (f"dec{k}.conv_a", 2 * c[k], c[k]),
                   (f"dec{k}.conv_b", c[k], c[k])]
    layers.append(("head", c[0], cfg.out_channels))
    return layers


def _init(shapes, kernel: int, seed: int) -> OrderedDict:
    gen = torch.Generator().manual_seed(seed)
    params = OrderedDict()
    for name, cin, cout in shapes:
        bound = 1.0 / math.sqrt(cin * kernel * kernel)
        w = (torch.rand(cout, cin, kernel, kernel, generator=gen) * 2 - 1) * bound
        b = (torch.rand(cout, generator=gen) * 2 - 1) * bound
        params[f"{name}.weight"] = w.requires_grad_(True)
        params[f"{name}.bias"] = b.requires_grad_(True)
    return params


def init_unet(cfg: UNetConfig, seed: int = 0) -> OrderedDict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, seeded."""
    return _init(_conv_shapes(cfg), cfg.kernel, seed)


def init_ncbc(cfg: NCBCConfig = NCBCConfig(), seed: int = 0) -> OrderedDict:
    shapes = []
    for i in range(cfg.layers):
        cin = cfg.in_channels if i == 0 else cfg.hidden_channels
        cout = cfg.feat_channels if i == cfg.layers - 1 else cfg.hidden_channels
        shapes.append((f"conv{i}", cin, cout))
    return _init(shapes, cfg.kernel, seed)


def unet_depth(params) -> int:
    levels = {int(m.group(1)) for k in params if (m := re.match(r"enc(\d+)\.", k))}
    return max(levels) + 1


def _conv(params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.weight"]
    return ad.conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[-1] // 2)


def _pad_to_multiple(x: Tensor, m: int) -> tuple[Tensor, tuple[int, int]]:
    h, w = x.shape[2:]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def unet_forward(params, x: Tensor) -> Tensor:
    """Raw (pre-activation) U-Net output with the input's spatial size."""
    depth = unet_depth(params)
    x, (h, w) = _pad_to_multiple(x, 2 ** (depth - 1))
    y = ad.relu(_conv(params, "enc0.conv_a", x))
    y = ad.relu(_conv(params, "enc0.conv_b", y))
    skips = [y]
    for k in range(1, depth):
        y = ad.relu(_conv(params, f"enc{k}.down", y, stride=2))
        y = ad.relu(_conv(params, f"enc{k}.conv", y))
        skips.append(y)
    for k in range(depth - 2, -1, -1):
        y = ad.relu(_conv(params, f"dec{k}.up", ad.upsample_nearest(y, 2)))
        y = ad.concat_channels(y, skips[k])
        y = ad.relu(_conv(params, f"dec{k}.conv_a", y))
        y = ad.relu(_conv(params, f"dec{k}.conv_b", y))
    out = _conv(params, "head", y)
    return out[:, :, :h, :w]


def _expect_channels(x: Tensor, n: int, what: str) -> None:
    if x.dim() != 4 or x.shape[1] != n:
        raise ValueError(f"{what}: expected (B, {n}, H, W), got {tuple(x.shape)}")


def decom_forward(params, s: Tensor) -> tuple[Tensor, Tensor]:
    """Split an RGB image into reflectance (3 ch) and illumination (1 ch), both in (0, 1)."""
    _expect_channels(s, 3, "decomposition input")
    out = unet_forward(params, s)
    if out.shape[1] != 4:
        raise ValueError(f"decomposition net emits {out.shape[1]} channels, expected 4")
    return ad.sigmoid(out[:, :3]), ad.sigmoid(out[:, 3:4])


def enhance_forward(params, r: Tensor, l: Tensor) -> Tensor:
    """Brightened single-channel illumination from the concatenated (R, L) input."""
    _expect_channels(r, 3, "reflectance")
    _expect_channels(l, 1, "illumination")
    if r.shape[0] != l.shape[0] or r.shape[2:] != l.shape[2:]:
        raise ValueError(f"reflectance {tuple(r.shape)} and illumination {tuple(l.shape)} misaligned")
    out = unet_forward(params, ad.concat_channels(r, l))
    if out.shape[1] != 1:
        raise ValueError(f"enhancement net emits {out.shape[1]} channels, expected 1")
    return ad.sigmoid(out)


def ncbc_forward(params, x: Tensor) -> Tensor:
    """Stride-1 conv+ReLU stack; one parameter set serves every input branch."""
    n = sum(1 for k in params if k.endswith(".weight"))
    y = x
    for i in range(n):
        y = ad.relu(_conv(params, f"conv{i}", y))
    return y


def reconstruct(r: Tensor, l: Tensor) -> Tensor:
    """Pixel-wise product ``R * L`` with ``L`` broadcast across R's channels."""
    if r.shape[0] != l.shape[0] or r.shape[2:] != l.shape[2:] or l.shape[1] != 1:
        raise ValueError(f"cannot combine reflectance {tuple(r.shape)} with illumination {tuple(l.shape)}")
    return ad.mul(r, l.expand_as(r))
