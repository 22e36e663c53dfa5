"""Shared trainable blocks: residual convs, a conditional U-Net, time embedding,
and the frozen feature extractor used by the perceptual losses.

All modules take NCHW tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

FeaturePyramid = list[torch.Tensor]


class ShapeError(ValueError):
    """Raised when tensors disagree on spatial or channel layout."""


@dataclass
class UNetSpec:
    in_channels: int
    out_channels: int
    base_width: int = 32
    num_scales: int = 3
    time_embed_dim: int = 64
    guidance_channels: list[int] = field(default_factory=list)
    zero_init_output: bool = True

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("num_scales must be >= 1")
        if self.base_width < 8:
            raise ValueError("base_width must be >= 8")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if not self.guidance_channels:
            self.guidance_channels = [0] * self.num_scales
        if len(self.guidance_channels) != self.num_scales:
            raise ValueError("guidance_channels needs one entry per scale")

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.num_scales)]


def sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """sin/cos of ``t`` on a geometric frequency ladder from 1 to 1e4.

    ``t`` has shape (B,); the result is (B, dim) with all sines first.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    exponents = torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1)
    freqs = 10.0 ** (4.0 * exponents)
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ValueError(f"embedding dim must be even, got {dim}")
        self.dim = dim
        self.mlp = he_init(nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim)))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_features(t, self.dim))


def time_embedding(t, dim: int, module: TimeEmbedding | None = None) -> torch.Tensor:
    """Projected embedding of ``t``; without ``module`` the raw sinusoidal features."""
    t = torch.as_tensor(t, dtype=torch.get_default_dtype())
    if torch.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if module is None:
        return sinusoidal_features(t, dim)
    return module(t)


def he_init(module: nn.Module, gain: float = 1.0) -> nn.Module:
    """He-normal weights and zero biases for every conv / linear layer in ``module``.

    PyTorch's default init shrinks activations by ~0.6x per layer, which
    starves the deep encoder-decoder paths of gradient.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            m.weight.data.mul_(gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


class ResBlock(nn.Module):
    """Two 3x3 convs with SiLU and an optional additive time embedding."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int = 0):
        super().__init__()
        self.conv1 = he_init(nn.Conv2d(in_ch, out_ch, 3, padding=1))
        # residual branch starts small so stacked blocks stay near identity
        self.conv2 = he_init(nn.Conv2d(out_ch, out_ch, 3, padding=1), gain=0.5)
        self.temb = he_init(nn.Linear(temb_dim, out_ch)) if temb_dim else None
        self.skip = he_init(nn.Conv2d(in_ch, out_ch, 1)) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        if self.temb is not None and temb is not None:
            h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(h)
        return F.silu(h + self.skip(x))


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = he_init(nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1))

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = he_init(nn.Conv2d(in_ch, out_ch, 3, padding=1))

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """U-Net with per-scale guidance concatenated into the decoder.

    Scale ``i`` runs at 1/2**i of the input resolution. ``guidance[i]``, when
    ``guidance_channels[i]`` is non-zero, is concatenated with decoder features at
    scale ``i`` before that scale's residual block.
    """

    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths()
        tdim = spec.time_embed_dim
        self.time_embed = TimeEmbedding(tdim) if tdim else None
        self.stem = he_init(nn.Conv2d(spec.in_channels, widths[0], 3, padding=1))
        self.enc = nn.ModuleList(ResBlock(w, w, tdim) for w in widths)
        self.down = nn.ModuleList(Downsample(widths[i], widths[i + 1]) for i in range(len(widths) - 1))
        self.dec = nn.ModuleList(
            ResBlock(2 * w + g, w, tdim) for w, g in zip(widths, spec.guidance_channels)
        )
        self.up = nn.ModuleList(Upsample(widths[i + 1], widths[i]) for i in range(len(widths) - 1))
        self.head = nn.Conv2d(widths[0], spec.out_channels, 3, padding=1)
        if spec.zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None,
                guidance: FeaturePyramid | None = None) -> torch.Tensor:
        spec = self.spec
        factor = 2 ** (spec.num_scales - 1)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ShapeError(f"input {tuple(x.shape[-2:])} not divisible by {factor}")
        if x.shape[1] != spec.in_channels:
            raise ShapeError(f"expected {spec.in_channels} input channels, got {x.shape[1]}")
        temb = None
        if self.time_embed is not None:
            if t is None:
                raise ValueError("this U-Net is time-conditioned; pass t")
            t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
            if t.ndim == 0:
                t = t.expand(x.shape[0])
            temb = self.time_embed(t)

        skips = []
        h = self.stem(x)
        for i, block in enumerate(self.enc):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)

        for i in reversed(range(spec.num_scales)):
            parts = [h, skips[i]]
            if spec.guidance_channels[i]:
                parts.append(self._guidance_at(guidance, i, skips[i]))
            h = self.dec[i](torch.cat(parts, dim=1), temb)
            if i > 0:
                h = self.up[i - 1](h)
        return self.head(h)

    def _guidance_at(self, guidance, i, ref):
        if guidance is None or len(guidance) <= i or guidance[i] is None:
            raise ShapeError(f"guidance missing for scale {i}")
        g = guidance[i]
        if g.shape[-2:] != ref.shape[-2:]:
            raise ShapeError(
                f"guidance level {i} is {tuple(g.shape[-2:])}, U-Net scale is {tuple(ref.shape[-2:])}"
            )
        if g.shape[1] != self.spec.guidance_channels[i]:
            raise ShapeError(
                f"guidance level {i} has {g.shape[1]} channels, expected {self.spec.guidance_channels[i]}"
            )
        return g


def unet_forward(net: UNet, x, t=None, guidance=None):
    return net(x, t, guidance)


class FrozenFeatures(nn.Module):
    """Fixed random-weight 3-level conv pyramid standing in for a pretrained network.

    Weights are drawn from a private generator and stored as buffers, so they
    are never seen by an optimizer and follow the input dtype.
    """

    widths = (16, 32, 64)

    def __init__(self, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        in_ch = 3
        for i, w in enumerate(self.widths):
            fan_in = in_ch * 9
            # fixed dtype: a float64 draw from the same generator yields different weights
            weight = torch.randn(w, in_ch, 3, 3, generator=gen, dtype=torch.float32) * math.sqrt(2.0 / fan_in)
            self.register_buffer(f"w{i}", weight)
            self.register_buffer(f"b{i}", torch.zeros(w, dtype=torch.float32))
            in_ch = w

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.shape[1] != 3:
            raise ShapeError(f"feature extractor expects 3 channels, got {x.shape[1]}")
        # centre inputs so the first layer sees signed signals
        h = 2.0 * x - 1.0
        levels = []
        for i in range(len(self.widths)):
            w, b = getattr(self, f"w{i}").to(x.dtype), getattr(self, f"b{i}").to(x.dtype)
            h = F.silu(F.conv2d(h, w, b, stride=1 if i == 0 else 2, padding=1))
            levels.append(h)
        return levels


_PHI: FrozenFeatures | None = None


def phi() -> FrozenFeatures:
    """Process-wide frozen extractor instance."""
    global _PHI
    if _PHI is None:
        _PHI = FrozenFeatures()
    return _PHI


def phi_features(image: torch.Tensor) -> FeaturePyramid:
    return phi()(image)


def perceptual_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean over pyramid levels of the feature-space MSE."""
    fa, fb = phi_features(a), phi_features(b)
    return sum(F.mse_loss(x, y) for x, y in zip(fa, fb)) / len(fa)


def raw_to_rgb3(raw: torch.Tensor) -> torch.Tensor:
    """Packed RGGB (N, 4, h, w) to (N, 3, h, w) as R, mean(G_r, G_b), B."""
    return torch.stack([raw[:, 0], 0.5 * (raw[:, 1] + raw[:, 2]), raw[:, 3]], dim=1)


def to_nchw(images) -> torch.Tensor:
    """Stack HWC numpy rasters (or objects with ``.data``) into an NCHW float tensor."""
    arrays = [im if isinstance(im, np.ndarray) else im.data for im in images]
    return torch.stack([torch.as_tensor(a, dtype=torch.get_default_dtype()).permute(2, 0, 1) for a in arrays])


def to_hwc(batch: torch.Tensor):
    return [x.detach().permute(1, 2, 0).cpu().double().numpy() for x in batch]
