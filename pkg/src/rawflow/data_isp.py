"""Synthetic forward ISP and paired dataset generation.

The simulator renders linear RAW mosaics to display RGB with a fixed chain:
bilinear demosaic, white balance, color correction, power-law gamma and
quantization. RAW data is stored as packed half-resolution RGGB planes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from rawflow import raster

if TYPE_CHECKING:
    from rawflow.config import DataConfig

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

# Relative sensitivity of the simulated sensor's R, G, B sites. Green is the
# strongest channel, as on real Bayer sensors; white balance undoes this.
SENSOR_RESPONSE = (0.55, 1.0, 0.7)
# Chroma kept around a per-pixel grey level. Fully saturated shapes push ~13% of
# pixels outside [0, 1] after the colour matrix, and that clipping is not invertible.
SCENE_CHROMA = 0.6

# RGGB offsets within a 2x2 cell, in packed channel order R, G_r, G_b, B.
_RGGB_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))
_RGGB_CHANNEL = ((0, 1), (1, 2))  # scene channel sampled at (y % 2, x % 2)


class DimensionError(ValueError):
    """Raised for rasters whose spatial size violates the Bayer layout."""


@dataclass
class RawImage:
    """Packed RGGB raster, shape (H/2, W/2, 4), linear values in [0, 1]."""

    data: np.ndarray
    bit_depth: int = 12
    white_level: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[-1] != 4:
            raise DimensionError(f"RAW data must be (h, w, 4), got {self.data.shape}")
        if min(self.data.shape[:2]) < 1:
            raise DimensionError("RAW spatial dims must be positive")


@dataclass
class RgbImage:
    """Display RGB raster, shape (H, W, 3), values in [0, 1]."""

    data: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[-1] != 3:
            raise DimensionError(f"RGB data must be (H, W, 3), got {self.data.shape}")


def _default_ccm() -> list[list[float]]:
    return [
        [1.30, -0.20, -0.10],
        [-0.15, 1.25, -0.10],
        [-0.05, -0.25, 1.30],
    ]


@dataclass
class IspParams:
    wb_gains: tuple[float, float, float] = (1.8, 1.0, 1.4)
    ccm: list[list[float]] = field(default_factory=_default_ccm)
    gamma: float = 1 / 2.2
    noise_std: float = 0.0
    rgb_bit_depth: int = 8
    raw_bit_depth: int = 12

    def __post_init__(self):
        self.wb_gains = tuple(float(g) for g in self.wb_gains)
        ccm = np.asarray(self.ccm, dtype=np.float64)
        if len(self.wb_gains) != 3 or min(self.wb_gains) <= 0:
            raise ValueError(f"wb_gains must be 3 positive values, got {self.wb_gains}")
        if ccm.shape != (3, 3):
            raise ValueError(f"ccm must be 3x3, got shape {ccm.shape}")
        if np.any(np.abs(ccm.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError(f"ccm rows must sum to 1, got {ccm.sum(axis=1)}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not (1 <= self.rgb_bit_depth <= 16 and 1 <= self.raw_bit_depth <= 16):
            raise ValueError("bit depths must lie in [1, 16]")
        self.ccm = ccm.tolist()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wb_gains"] = list(self.wb_gains)
        return d


def _check_even(h: int, w: int) -> None:
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic dimensions must be even, got {h}x{w}")


def quantize(x: np.ndarray, bit_depth: int) -> np.ndarray:
    """Snap values in [0, 1] to the ``bit_depth`` grid, rounding half away from zero."""
    levels = 2**bit_depth - 1
    codes = np.floor(np.clip(x, 0.0, 1.0) * levels + 0.5)
    return codes / levels


def to_codes(x: np.ndarray, bit_depth: int) -> np.ndarray:
    levels = 2**bit_depth - 1
    return np.floor(np.clip(x, 0.0, 1.0) * levels + 0.5).astype(np.uint16)


def from_codes(codes: np.ndarray, bit_depth: int) -> np.ndarray:
    return codes.astype(np.float64) / (2**bit_depth - 1)


def mosaic(scene: np.ndarray) -> np.ndarray:
    """Sample an (H, W, 3) scene through an RGGB color filter array."""
    scene = np.asarray(scene, dtype=np.float64)
    if scene.ndim != 3 or scene.shape[-1] != 3:
        raise DimensionError(f"scene must be (H, W, 3), got {scene.shape}")
    h, w, _ = scene.shape
    _check_even(h, w)
    bayer = np.empty((h, w), dtype=np.float64)
    for dy in range(2):
        for dx in range(2):
            bayer[dy::2, dx::2] = scene[dy::2, dx::2, _RGGB_CHANNEL[dy][dx]]
    return bayer


def pack_rggb(bayer: np.ndarray) -> np.ndarray:
    bayer = np.asarray(bayer)
    if bayer.ndim != 2:
        raise DimensionError(f"bayer must be 2-D, got {bayer.shape}")
    _check_even(*bayer.shape)
    return np.stack([bayer[dy::2, dx::2] for dy, dx in _RGGB_OFFSETS], axis=-1)


def unpack_rggb(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[-1] != 4:
        raise DimensionError(f"packed RAW must be (h, w, 4), got {packed.shape}")
    h, w, _ = packed.shape
    bayer = np.empty((2 * h, 2 * w), dtype=packed.dtype)
    for k, (dy, dx) in enumerate(_RGGB_OFFSETS):
        bayer[dy::2, dx::2] = packed[..., k]
    return bayer


_BILINEAR_KERNEL = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])


def demosaic_bilinear(bayer: np.ndarray) -> np.ndarray:
    """Bilinear demosaic of an RGGB mosaic.

    Implemented as normalized convolution so image borders use only the
    samples that exist; a constant mosaic therefore demosaics to that constant.
    """
    bayer = np.asarray(bayer, dtype=np.float64)
    h, w = bayer.shape
    _check_even(h, w)
    out = np.empty((h, w, 3), dtype=np.float64)
    for c in range(3):
        mask = np.zeros((h, w), dtype=np.float64)
        for dy in range(2):
            for dx in range(2):
                if _RGGB_CHANNEL[dy][dx] == c:
                    mask[dy::2, dx::2] = 1.0
        num = ndimage.correlate(bayer * mask, _BILINEAR_KERNEL, mode="constant")
        den = ndimage.correlate(mask, _BILINEAR_KERNEL, mode="constant")
        # Known sites keep their sample; the kernel weights them by 1.0 alone.
        out[..., c] = np.where(mask > 0, bayer, num / den)
    return out


def render_rgb(raw: RawImage, params: IspParams) -> RgbImage:
    bayer = unpack_rggb(raw.data)
    rgb = demosaic_bilinear(bayer)
    rgb = np.clip(rgb * np.asarray(params.wb_gains), 0.0, 1.0)
    rgb = np.clip(rgb @ np.asarray(params.ccm).T, 0.0, 1.0)
    rgb = rgb**params.gamma
    return RgbImage(quantize(rgb, params.rgb_bit_depth), bit_depth=params.rgb_bit_depth)


def synthesize_scene(seed: int, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Random linear scene: smooth gradients overlaid with flat-colored shapes.

    Each channel is stretched to span [0, 1], chroma is pulled towards grey by
    ``SCENE_CHROMA``, and the result is mapped into ``[lo, hi]`` and scaled by
    ``SENSOR_RESPONSE``.
    """
    h, w = size
    if h < 16 or w < 16:
        raise DimensionError(f"scene size must be at least 16x16, got {h}x{w}")
    _check_even(h, w)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    img = np.empty((h, w, 3))
    for c in range(3):
        a, b, cc = rng.uniform(-0.5, 0.5, size=3)
        fy, fx, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + a * yy + b * xx + 0.2 * cc * np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)

    for _ in range(rng.integers(3, 9)):
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            y0, x0 = rng.uniform(0, 0.8, size=2)
            hh, ww = rng.uniform(0.1, 0.5, size=2)
            sel = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            r = rng.uniform(0.05, 0.3)
            sel = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        img[sel] = color

    lo, hi = rng.uniform(0.0, 0.08), rng.uniform(0.88, 1.0)
    cmin, cmax = img.min(axis=(0, 1)), img.max(axis=(0, 1))
    img = (img - cmin) / np.maximum(cmax - cmin, 1e-6)
    grey = img.mean(axis=2, keepdims=True)
    img = grey + SCENE_CHROMA * (img - grey)
    img = lo + (hi - lo) * img
    return img * np.asarray(SENSOR_RESPONSE)


def simulate_pair(seed: int, size: tuple[int, int], params: IspParams) -> tuple[RgbImage, RawImage]:
    """Ground-truth RAW and its rendered RGB for one seed."""
    packed = pack_rggb(mosaic(synthesize_scene(seed, size)))
    if params.noise_std > 0:
        noise_rng = np.random.default_rng([seed, 1])
        packed = packed + noise_rng.normal(0.0, params.noise_std, size=packed.shape)
    raw = RawImage(quantize(packed, params.raw_bit_depth), bit_depth=params.raw_bit_depth)
    return render_rgb(raw, params), raw


def split_counts(n: int, train_fraction: float) -> tuple[int, int]:
    n_train = int(round(n * train_fraction))
    return n_train, n - n_train


def generate_dataset(config: DataConfig, out_dir: str | Path) -> dict:
    """Render ``config.num_pairs`` pairs and write them under ``out_dir``.

    Returns the manifest, which is also written to ``out_dir/manifest.json``.
    """
    out_dir = Path(out_dir)
    params = config.isp
    seeds = [config.seed + i for i in range(config.num_pairs)]
    n_train, _ = split_counts(len(seeds), config.train_fraction)
    order = np.random.default_rng([config.seed, 0]).permutation(len(seeds))
    split_of = {seeds[i]: ("train" if rank < n_train else "test") for rank, i in enumerate(order)}

    pairs = []
    for split in ("train", "test"):
        try:
            (out_dir / split).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {out_dir / split}: {exc}") from exc
    for seed in seeds:
        rgb, raw = simulate_pair(seed, tuple(config.size), params)
        split = split_of[seed]
        stem = f"{split}/{seed:06d}"
        raster.write_raster(out_dir / f"{stem}_rgb.rt", to_codes(rgb.data, params.rgb_bit_depth))
        raster.write_raster(out_dir / f"{stem}_raw.rt", to_codes(raw.data, params.raw_bit_depth))
        pairs.append({"seed": seed, "split": split, "rgb": f"{stem}_rgb.rt", "raw": f"{stem}_raw.rt"})

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": config.seed,
        "size": list(config.size),
        "isp": params.to_dict(),
        "pairs": pairs,
    }
    try:
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write manifest in {out_dir}: {exc}") from exc
    log.info("wrote %d pairs (%d train) to %s", len(pairs), n_train, out_dir)
    return manifest


def split_names(root: str | Path, split: str) -> list[str]:
    """Stems (zero-padded scene seeds) of one split, in manifest order."""
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    return [Path(p["raw"]).name.removesuffix("_raw.rt") for p in manifest["pairs"] if p["split"] == split]


def load_dataset(root: str | Path, split: str) -> tuple[list[RgbImage], list[RawImage], IspParams]:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read manifest in {root}: {exc}") from exc
    params = IspParams(**manifest["isp"])
    rgbs, raws = [], []
    for pair in manifest["pairs"]:
        if pair["split"] != split:
            continue
        rgbs.append(RgbImage(from_codes(raster.read_raster(root / pair["rgb"]), params.rgb_bit_depth),
                             bit_depth=params.rgb_bit_depth))
        raws.append(RawImage(from_codes(raster.read_raster(root / pair["raw"]), params.raw_bit_depth),
                             bit_depth=params.raw_bit_depth))
    return rgbs, raws, params
