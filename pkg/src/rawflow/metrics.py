"""PSNR / SSIM in the packed RAW domain and on rendered RGB."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from rawflow.data_isp import IspParams, RawImage, render_rgb

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``math.inf``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' Gaussian filtering over the two leading axes
    r = len(g) // 2
    y = correlate1d(x, g, axis=0, mode="constant")[r:-r] if r else x
    y = correlate1d(y, g, axis=1, mode="constant")[:, r:-r] if r else y
    return y


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window over valid positions, averaged over channels."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(0, 1))
    return float(np.clip(per_channel.mean(), -1.0, 1.0))


@dataclass
class EvalRow:
    name: str
    psnr_raw: float
    ssim_raw: float
    psnr_rgb: float
    ssim_rgb: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    config_fingerprint: str = ""
    mean: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rows:
            raise ValueError("an evaluation report needs at least one image")
        self.mean = mean_metrics(self.rows)

    @property
    def count(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str | Path) -> None:
        cols = ["name", "psnr_raw", "ssim_raw", "psnr_rgb", "ssim_rgb"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([row.name] + [_fmt(getattr(row, c)) for c in cols[1:]])
            writer.writerow(["mean"] + [_fmt(self.mean[c]) for c in cols[1:]])

    def write_json(self, path: str | Path) -> None:
        summary = {
            "count": self.count,
            "config_fingerprint": self.config_fingerprint,
            "mean": {k: (None if math.isinf(v) else v) for k, v in self.mean.items()},
            "rows": [asdict(r) for r in self.rows],
        }
        for row in summary["rows"]:
            for k, v in row.items():
                if isinstance(v, float) and math.isinf(v):
                    row[k] = "inf"
        Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def mean_metrics(rows: list[EvalRow]) -> dict:
    out = {}
    for key in ("psnr_raw", "ssim_raw", "psnr_rgb", "ssim_rgb"):
        vals = [getattr(r, key) for r in rows]
        finite = [v for v in vals if not math.isinf(v)]
        if len(finite) < len(vals):
            warnings.warn(f"{len(vals) - len(finite)} identical image(s) excluded from mean {key}",
                          stacklevel=3)
        out[key] = float(np.mean(finite)) if finite else math.inf
    return out


def evaluate(pred: RawImage, gt: RawImage, isp: IspParams, name: str = "") -> EvalRow:
    """RAW metrics on the packed arrays, RGB metrics on both rendered through ``isp``."""
    pred_rgb, gt_rgb = render_rgb(pred, isp), render_rgb(gt, isp)
    return EvalRow(
        name=name,
        psnr_raw=psnr(pred.data, gt.data),
        ssim_raw=ssim(pred.data, gt.data),
        psnr_rgb=psnr(pred_rgb.data, gt_rgb.data),
        ssim_rgb=ssim(pred_rgb.data, gt_rgb.data),
    )


def evaluate_set(preds: list[RawImage], gts: list[RawImage], isp: IspParams,
                 names: list[str] | None = None, config_fingerprint: str = "") -> EvalReport:
    names = names or [f"{i:05d}" for i in range(len(gts))]
    rows = [evaluate(p, g, isp, n) for p, g, n in zip(preds, gts, names)]
    return EvalReport(rows, config_fingerprint)


def fingerprint(config_json: str) -> str:
    return hashlib.sha256(config_json.encode()).hexdigest()[:16]
