"""
Three-stage training on a small synthetic set
=============================================

Stage 1 fits the paired autoencoders, stage 2 fits the latent flow with the
autoencoders frozen, stage 3 fine-tunes everything through the Euler sampler.
This uses a deliberately small budget (a couple of minutes on one core); the
acceptance run uses ``configs/toy.json``.
"""

import tempfile
from pathlib import Path

from rawflow.config import load_config
from rawflow.data_isp import generate_dataset
from rawflow.trainer import (
    PairedData,
    autoencode_raw,
    evaluate_models,
    finetune_end_to_end,
    mean_psnr,
    predict_raw,
    train_stage1_dlae,
    train_stage2_dlfm,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
cfg = load_config(CONFIGS / "toy.json", [
    "data.num_pairs=40", "data.size=[32,32]",
    "stage1.epochs=15", "stage2.epochs=15", "stage3.epochs=2",
])

root = Path(tempfile.mkdtemp(prefix="rawflow_demo_"))
generate_dataset(cfg.data, root / "data")
data = PairedData.load(root / "data")
print(f"{len(data.train)} training pairs, {len(data.test)} held out")

s1 = train_stage1_dlae(cfg, data, root / "run")
dlae = s1.models["dlae"]
print("stage 1: RAW autoencoder PSNR", round(mean_psnr(autoencode_raw(dlae, data.test), data.test.raw), 2))

s2 = train_stage2_dlfm(cfg, dlae, data, root / "run")
dlfm = s2.models["dlfm"]
print("stage 2: RGB->RAW PSNR", round(mean_psnr(predict_raw(dlae, dlfm, data.test.rgb), data.test.raw), 2))

finetune_end_to_end(cfg, dlae, dlfm, data, root / "run")
report = evaluate_models(cfg, dlae, dlfm, data)
print("stage 3: mean metrics", {k: round(v, 4) for k, v in report.mean.items()})

report.write_csv(root / "run" / "eval.csv")
print("artifacts in", root / "run", sorted(p.name for p in (root / "run").iterdir()))
