"""
Ablation grid
=============

Alignment loss on/off for the autoencoder, deterministic vs stochastic flow,
and three guidance modes, all trained with identical budgets and seeds. This
is a quick, small-budget version; with budgets this short the rankings can be
noisy. ``configs/ablation.json`` holds the acceptance budget.
"""

import tempfile
from collections import defaultdict
from pathlib import Path

import numpy as np

from rawflow.config import load_config
from rawflow.data_isp import generate_dataset
from rawflow.trainer import PairedData, run_ablation

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
cfg = load_config(CONFIGS / "ablation.json", [
    "data.num_pairs=40", "data.size=[32,32]",
    "stage1.epochs=10", "stage2.epochs=10", "ablation.seeds=[0]",
])

root = Path(tempfile.mkdtemp(prefix="rawflow_ablate_"))
generate_dataset(cfg.data, root / "data")
rows = run_ablation(cfg, PairedData.load(root / "data"), root / "out")

by_variant = defaultdict(list)
for r in rows:
    by_variant[r.variant].append(r.psnr_raw)
for variant, values in by_variant.items():
    print(f"{variant:12s} {np.mean(values):6.2f} dB RAW PSNR")
print((root / "out" / "ablation.csv").read_text())
