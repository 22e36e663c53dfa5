"""
Dual-domain metrics
===================

Predictions are scored on the packed RAW arrays and again after rendering
both prediction and ground truth through the same ISP.
"""

import numpy as np

from rawflow.data_isp import IspParams, RawImage, simulate_pair
from rawflow.metrics import evaluate, psnr, ssim

_, gt = simulate_pair(seed=3, size=(64, 64), params=IspParams())
rng = np.random.default_rng(0)

# PSNR falls monotonically as noise grows; SSIM follows
for amp in (0.005, 0.02, 0.08):
    noisy = np.clip(gt.data + amp * rng.standard_normal(gt.data.shape), 0, 1)
    print(f"noise {amp:.3f}: PSNR {psnr(noisy, gt.data):6.2f} dB  SSIM {ssim(noisy, gt.data):.4f}")

# the same RAW error scores differently once gamma and the colour matrix are applied
pred = RawImage(np.clip(gt.data * 1.05, 0, 1), bit_depth=12)
row = evaluate(pred, gt, IspParams(), name="gain+5%")
print(row)

# identical images: infinite PSNR, SSIM exactly one
print(evaluate(gt, gt, IspParams()))
