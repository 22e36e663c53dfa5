"""Dual-domain latent autoencoder.

The RGB encoder downsamples the full-resolution image 8x and the RAW encoder
downsamples the half-resolution packed mosaic 4x, so paired latents share one
shape. Shallow RGB encoder features, average-pooled onto the RAW grid, are
both the alignment target for the RAW encoder and the side input of the RAW
decoder.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from rawflow.nn_core import (
    Downsample,
    FeaturePyramid,
    ResBlock,
    ShapeError,
    Upsample,
    he_init,
    perceptual_distance,
    raw_to_rgb3,
)


class Encoder(nn.Module):
    def __init__(self, in_ch: int, widths: list[int], latent_ch: int):
        super().__init__()
        self.stem = he_init(nn.Conv2d(in_ch, widths[0], 3, padding=1))
        self.blocks = nn.ModuleList(ResBlock(w, w) for w in widths)
        self.down = nn.ModuleList(Downsample(widths[i], widths[i + 1]) for i in range(len(widths) - 1))
        self.to_latent = he_init(nn.Conv2d(widths[-1], latent_ch, 3, padding=1), gain=0.5)
        self.factor = 2 ** (len(widths) - 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise ShapeError(f"input {tuple(x.shape[-2:])} not divisible by {self.factor}")
        feats = []
        h = self.stem(x)
        for i, block in enumerate(self.blocks):
            h = block(h)
            feats.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        return self.to_latent(h), feats


class Decoder(nn.Module):
    """Latent to image; ``inject[i]`` extra channels are concatenated at scale ``i``."""

    def __init__(self, latent_ch: int, widths: list[int], out_ch: int, inject: list[int] | None = None):
        super().__init__()
        n = len(widths)
        self.inject = inject or [0] * n
        self.from_latent = he_init(nn.Conv2d(latent_ch, widths[-1], 3, padding=1))
        self.blocks = nn.ModuleList(ResBlock(widths[i] + self.inject[i], widths[i]) for i in range(n))
        self.up = nn.ModuleList(Upsample(widths[i + 1], widths[i]) for i in range(n - 1))
        self.head = nn.Conv2d(widths[0], out_ch, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor, side: dict[int, torch.Tensor] | None = None) -> torch.Tensor:
        h = self.from_latent(z)
        for i in reversed(range(len(self.blocks))):
            if i < len(self.blocks) - 1:
                h = self.up[i](h)
            if self.inject[i]:
                if side is None or i not in side:
                    raise ShapeError(f"decoder expects side features at scale {i}")
                s = side[i]
                if s.shape[-2:] != h.shape[-2:] or s.shape[1] != self.inject[i]:
                    raise ShapeError(
                        f"side features at scale {i} are {tuple(s.shape[1:])}, "
                        f"decoder needs ({self.inject[i]}, {h.shape[-2]}, {h.shape[-1]})"
                    )
                h = torch.cat([h, s], dim=1)
            h = self.blocks[i](h)
        return self.head(h)


class DLAE(nn.Module):
    """Paired RGB/RAW autoencoders.

    ``align_layers`` picks the shallow encoder scales that are aligned and
    injected into the RAW decoder.
    """

    def __init__(self, latent_channels: int = 8, width: int = 16, align_layers=(0, 1), inject_rgb: bool = True):
        super().__init__()
        self.latent_channels = latent_channels
        self.align_layers = list(align_layers)
        self.inject_rgb = inject_rgb
        raw_widths = [width, 2 * width, 4 * width]
        rgb_widths = raw_widths + [4 * width]
        self.rgb_encoder = Encoder(3, rgb_widths, latent_channels)
        self.rgb_decoder = Decoder(latent_channels, rgb_widths, 3)
        self.raw_encoder = Encoder(4, raw_widths, latent_channels)
        inject = [raw_widths[i] if (inject_rgb and i in self.align_layers) else 0 for i in range(3)]
        self.raw_decoder = Decoder(latent_channels, raw_widths, 4, inject)

    @property
    def rgb_branch(self) -> list[nn.Module]:
        return [self.rgb_encoder, self.rgb_decoder]

    @property
    def raw_branch(self) -> list[nn.Module]:
        return [self.raw_encoder, self.raw_decoder]

    def encode_rgb(self, rgb: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        """Returns the latent and the RGB features at ``align_layers``, pooled onto the RAW grid."""
        z, feats = self.rgb_encoder(rgb)
        return z, [F.avg_pool2d(feats[l], 2) for l in self.align_layers]

    def encode_raw(self, raw: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        z, feats = self.raw_encoder(raw)
        return z, [feats[l] for l in self.align_layers]

    def decode_raw(self, z: torch.Tensor, f_rgb: FeaturePyramid | None, clamp: bool = True) -> torch.Tensor:
        side = dict(zip(self.align_layers, f_rgb)) if (self.inject_rgb and f_rgb is not None) else None
        out = self.raw_decoder(z, side)
        return out.clamp(0.0, 1.0) if clamp else out

    def decode_rgb(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        out = self.rgb_decoder(z)
        return out.clamp(0.0, 1.0) if clamp else out


def feature_alignment_loss(f_raw: FeaturePyramid, f_rgb: FeaturePyramid) -> torch.Tensor:
    """Sum over aligned layers of the per-layer mean squared feature difference."""
    if len(f_raw) != len(f_rgb) or not f_raw:
        raise ShapeError(f"pyramids have {len(f_raw)} and {len(f_rgb)} levels")
    total = 0.0
    for a, b in zip(f_raw, f_rgb):
        if a.shape != b.shape:
            raise ShapeError(f"aligned features differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = total + F.mse_loss(a, b)
    return total


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, lambda_perceptual: float = 0.01) -> torch.Tensor:
    """Pixel MSE plus weighted perceptual distance; 4-channel RAW goes through ``raw_to_rgb3``."""
    loss = F.mse_loss(pred, target)
    if lambda_perceptual:
        if pred.shape[1] == 4:
            pred, target = raw_to_rgb3(pred), raw_to_rgb3(target)
        loss = loss + lambda_perceptual * perceptual_distance(pred, target)
    return loss
