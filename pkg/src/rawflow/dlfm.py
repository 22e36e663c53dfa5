"""Deterministic latent flow matching between RGB and RAW latents.

Training regresses the constant velocity ``z1 - z0`` along the straight path
``z_t = t*z1 + (1-t)*z0``; inference integrates the learned field from the RGB
latent with K explicit Euler steps. The stochastic variant replaces ``z0`` by
Gaussian noise and is kept as an ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from rawflow.nn_core import Downsample, FeaturePyramid, ResBlock, ShapeError, UNet, UNetSpec, he_init

VelocityField = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class FlowState:
    z_t: torch.Tensor
    t: float

    def __post_init__(self):
        if not 0.0 <= float(self.t) <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if not torch.isfinite(self.z_t).all():
            raise NonFiniteError("flow state is not finite")


def _broadcast_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if torch.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1 and like.ndim > 1:
        if t.shape[0] != like.shape[0]:
            raise ShapeError(f"{t.shape[0]} times for a batch of {like.shape[0]}")
        t = t.reshape(-1, *([1] * (like.ndim - 1)))
    return t


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"latent shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t) -> torch.Tensor:
    _check_same(z0, z1)
    t = _broadcast_t(t, z0)
    return t * z1 + (1 - t) * z0


def target_velocity(z0: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    _check_same(z0, z1)
    return z1 - z0


def stochastic_interpolate(z1: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Noise-to-data path; identical to ``interpolate`` with ``eps`` as the source."""
    return interpolate(eps, z1, t)


def flow_loss(v_pred: torch.Tensor, v_target: torch.Tensor) -> torch.Tensor:
    _check_same(v_pred, v_target)
    return F.mse_loss(v_pred, v_target)


class ContextExtractor(nn.Module):
    """RGB context for the velocity U-Net.

    ``cross``: residual stem down to the latent grid, then a small encoder
    producing one level per U-Net scale. ``single``: the same stem with an
    extra block, one level at the latent grid only. ``latent``: the RGB latent
    itself. ``none``: no guidance.
    """

    def __init__(self, mode: str, width: int, latent_channels: int, num_scales: int):
        super().__init__()
        if mode not in ("cross", "single", "latent", "none"):
            raise ValueError(f"unknown guidance mode {mode!r}")
        self.mode = mode
        self.num_scales = num_scales
        if mode in ("cross", "single"):
            half = max(width // 2, 8)
            self.stem = nn.Sequential(
                he_init(nn.Conv2d(3, half, 3, stride=2, padding=1)),
                nn.SiLU(),
            )
            self.stem_blocks = nn.ModuleList([
                ResBlock(half, half),
                ResBlock(width, width),
            ])
            self.stem_down = nn.ModuleList([Downsample(half, width), Downsample(width, width)])
        if mode == "cross":
            self.levels = nn.ModuleList(ResBlock(width, width) for _ in range(num_scales))
            self.level_down = nn.ModuleList(Downsample(width, width) for _ in range(num_scales - 1))
        elif mode == "single":
            self.levels = nn.ModuleList([ResBlock(width, width), ResBlock(width, width)])
        self.width = width
        self.latent_channels = latent_channels

    def channels(self) -> list[int]:
        n = self.num_scales
        if self.mode == "cross":
            return [self.width] * n
        if self.mode == "single":
            return [self.width] + [0] * (n - 1)
        if self.mode == "latent":
            return [self.latent_channels] + [0] * (n - 1)
        return [0] * n

    def forward(self, rgb: torch.Tensor, z_rgb: torch.Tensor | None = None) -> FeaturePyramid:
        if self.mode == "none":
            return []
        if self.mode == "latent":
            if z_rgb is None:
                raise ValueError("latent guidance needs the RGB latent")
            return [z_rgb]
        h = self.stem(rgb)
        h = self.stem_blocks[0](h)
        h = self.stem_down[0](h)
        h = self.stem_blocks[1](h)
        h = self.stem_down[1](h)
        if self.mode == "single":
            for block in self.levels:
                h = block(h)
            return [h]
        out = []
        for i, block in enumerate(self.levels):
            h = block(h)
            out.append(h)
            if i < len(self.level_down):
                h = self.level_down[i](h)
        return out


class DLFM(nn.Module):
    def __init__(self, latent_channels: int = 8, width: int = 32, num_scales: int = 3,
                 time_embed_dim: int = 64, guidance: str = "cross", guidance_width: int = 32,
                 variant: str = "deterministic"):
        super().__init__()
        if variant not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.context = ContextExtractor(guidance, guidance_width, latent_channels, num_scales)
        self.spec = UNetSpec(
            in_channels=latent_channels,
            out_channels=latent_channels,
            base_width=width,
            num_scales=num_scales,
            time_embed_dim=time_embed_dim,
            guidance_channels=self.context.channels(),
        )
        self.velocity = UNet(self.spec)

    def extract_context(self, rgb: torch.Tensor, z_rgb: torch.Tensor | None = None) -> FeaturePyramid:
        return self.context(rgb, z_rgb)

    def predict_velocity(self, z_t: torch.Tensor, t, guidance: FeaturePyramid) -> torch.Tensor:
        return self.velocity(z_t, t, guidance)

    def field(self, guidance: FeaturePyramid) -> VelocityField:
        return lambda z, t: self.predict_velocity(z, t, guidance)

    def training_loss(self, z0: torch.Tensor, z1: torch.Tensor, guidance: FeaturePyramid,
                      generator: torch.Generator) -> torch.Tensor:
        """Flow loss at one t ~ U(0, 1) per example."""
        n = z1.shape[0]
        t = torch.rand(n, generator=generator, dtype=z1.dtype)
        source = z0
        if self.variant == "stochastic":
            source = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
        z_t = interpolate(source, z1, t)
        return flow_loss(self.predict_velocity(z_t, t, guidance), target_velocity(source, z1))


def euler_integrate(z0: torch.Tensor, field: VelocityField, steps: int = 20,
                    grad_steps: int | None = None) -> torch.Tensor:
    """Explicit Euler from t=0 to t=1 with left-endpoint times ``k/steps``.

    With ``grad_steps`` set, only the final ``grad_steps`` updates are kept on
    the autograd tape.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = 1.0 / steps
    z = z0
    first_tracked = 0 if grad_steps is None else max(steps - grad_steps, 0)
    for k in range(steps):
        t = torch.full((z.shape[0],) if z.ndim > 1 else (), k / steps, dtype=z.dtype)
        if k < first_tracked:
            with torch.no_grad():
                z = z + dt * field(z, t)
        else:
            z = z + dt * field(z, t)
        if not torch.isfinite(z).all():
            raise NonFiniteError(f"non-finite latent after Euler step {k}", step=k)
    return z


def initial_latent(z_rgb: torch.Tensor, variant: str, noise_seed: int = 0) -> torch.Tensor:
    if variant == "deterministic":
        return z_rgb
    gen = torch.Generator().manual_seed(noise_seed)
    return torch.randn(z_rgb.shape, generator=gen, dtype=z_rgb.dtype)


def reconstruct(rgb: torch.Tensor, dlae, dlfm: DLFM, steps: int = 20, noise_seed: int = 0,
                grad_steps: int | None = None, clamp: bool = True) -> torch.Tensor:
    """RGB batch (N, 3, H, W) to packed RAW (N, 4, H/2, W/2)."""
    z_rgb, f_rgb = dlae.encode_rgb(rgb)
    guidance = dlfm.extract_context(rgb, z_rgb)
    z0 = initial_latent(z_rgb, dlfm.variant, noise_seed)
    z_raw = euler_integrate(z0, dlfm.field(guidance), steps, grad_steps)
    return dlae.decode_raw(z_raw, f_rgb, clamp=clamp)
