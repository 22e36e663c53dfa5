"""Three-stage training: autoencoders, then the flow with frozen autoencoders,
then end-to-end fine-tuning through the Euler sampler.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from rawflow import raster
from rawflow.config import RunConfig
from rawflow.data_isp import IspParams, RawImage, load_dataset, split_names
from rawflow.dlae import DLAE, feature_alignment_loss, reconstruction_loss
from rawflow.dlfm import DLFM, NonFiniteError, reconstruct
from rawflow.metrics import EvalReport, evaluate_set, fingerprint, psnr, ssim
from rawflow.nn_core import perceptual_distance, raw_to_rgb3, to_nchw

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_good: str | None = None):
        super().__init__(f"{message} (last good checkpoint: {last_good or 'none'})")
        self.last_good = last_good


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    # subnormal float32 arithmetic is orders of magnitude slower on CPU
    torch.set_flush_denormal(True)


def stream(seed: int, purpose: int) -> torch.Generator:
    """Independent generator for one random source (data order, t, noise) of a run."""
    return torch.Generator().manual_seed(seed * 1000 + purpose)


@dataclass
class PairedSplit:
    rgb: torch.Tensor  # (N, 3, H, W)
    raw: torch.Tensor  # (N, 4, H/2, W/2)
    names: list[str] = field(default_factory=list)

    def __len__(self):
        return self.rgb.shape[0]

    def batches(self, batch_size: int, generator: torch.Generator | None = None):
        n = len(self)
        order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            yield self.rgb[idx], self.raw[idx]


@dataclass
class PairedData:
    train: PairedSplit
    test: PairedSplit
    isp: IspParams

    @classmethod
    def load(cls, root: str | Path) -> PairedData:
        splits = {}
        for name in ("train", "test"):
            rgbs, raws, isp = load_dataset(root, name)
            if not rgbs:
                raise ValueError(f"dataset {root} has an empty {name} split")
            splits[name] = PairedSplit(to_nchw(rgbs), to_nchw(raws), split_names(root, name))
        return cls(splits["train"], splits["test"], isp)


class LossLog:
    """In-memory (step, loss_name, value) rows, optionally mirrored to a CSV file."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple[int, str, float]] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(["step", "loss_name", "value"])

    def add(self, step: int, name: str, value: float) -> None:
        self.rows.append((step, name, float(value)))
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([step, name, repr(float(value))])

    def values(self, name: str) -> list[float]:
        return [v for _, n, v in self.rows if n == name]


def build_dlae(cfg: RunConfig) -> DLAE:
    m = cfg.model
    return DLAE(m.latent_channels, m.ae_width, m.align_layers, m.inject_rgb)


def build_dlfm(cfg: RunConfig) -> DLFM:
    m = cfg.model
    return DLFM(m.latent_channels, m.flow_width, m.flow_scales, m.time_embed_dim,
                m.guidance, m.guidance_width, cfg.sampler.variant)


def make_optimizer(params, cfg: RunConfig, lr: float):
    o = cfg.optim
    opt = torch.optim.Adam(params, lr=lr, betas=(o.beta1, o.beta2), eps=o.eps)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=o.plateau_factor, patience=o.plateau_patience
    )
    return opt, sched


def set_frozen(modules, frozen: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(not frozen)


def _check_finite(value: torch.Tensor, what: str, step: int, last_good: str | None) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite {what} at step {step}", last_good)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory: str | Path, modules: dict[str, nn.Module], meta: dict) -> Path:
    """One ``.rt`` raster per tensor plus ``index.json`` mapping names to files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            key = f"{prefix}.{name}"
            fname = f"{key}.rt"
            raster.write_raster(directory / fname, tensor.detach().cpu().float().numpy())
            files[key] = fname
    index = {"format_version": raster.VERSION, "tensors": files, **meta}
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory: str | Path, modules: dict[str, nn.Module]) -> dict:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read checkpoint index in {directory}: {exc}") from exc
    for prefix, module in modules.items():
        state = {}
        for name, ref in module.state_dict().items():
            key = f"{prefix}.{name}"
            if key not in index["tensors"]:
                raise KeyError(f"checkpoint {directory} lacks tensor {key}")
            arr = raster.read_raster(directory / index["tensors"][key])
            state[name] = torch.from_numpy(arr).to(ref.dtype)
        module.load_state_dict(state)
    return index


def _meta(cfg: RunConfig, stage: str, extra: dict | None = None) -> dict:
    m = {"seed": cfg.seed, "stage": stage, "config": cfg.to_dict()}
    if extra:
        m.update(extra)
    return m


# -- stage 1 -----------------------------------------------------------------

@dataclass
class StageResult:
    models: dict[str, nn.Module]
    log: LossLog
    best_val: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def _raw_branch_loss(dlae: DLAE, rgb, raw, cfg: RunConfig):
    with torch.no_grad():
        _, f_rgb = dlae.encode_rgb(rgb)
    z_raw, f_raw = dlae.encode_raw(raw)
    pred = dlae.decode_raw(z_raw, f_rgb, clamp=False)
    rec = reconstruction_loss(pred, raw, cfg.loss.lambda_perceptual)
    fea = feature_alignment_loss(f_raw, f_rgb)
    return rec + cfg.loss.lambda_fea * fea, rec, fea, pred


def _rgb_branch_loss(dlae: DLAE, rgb, cfg: RunConfig):
    z, _ = dlae.encode_rgb(rgb)
    pred = dlae.decode_rgb(z, clamp=False)
    return reconstruction_loss(pred, rgb, cfg.loss.lambda_perceptual), pred


def train_stage1_dlae(cfg: RunConfig, data: PairedData, out_dir: str | Path | None = None,
                      dlae: DLAE | None = None) -> StageResult:
    """Alternate one RGB-branch and one RAW-branch update per batch."""
    out_dir = Path(out_dir) if out_dir else None
    seed_everything(cfg.seed)
    dlae = dlae or build_dlae(cfg)
    lr = cfg.stage_lr("stage1")
    opt_rgb, sched_rgb = make_optimizer([p for m in dlae.rgb_branch for p in m.parameters()], cfg, lr)
    opt_raw, sched_raw = make_optimizer([p for m in dlae.raw_branch for p in m.parameters()], cfg, lr)
    order = stream(cfg.seed, 1)
    losses = LossLog(out_dir / "stage1_loss.csv" if out_dir else None)
    best_state, best_val, history = None, float("inf"), []
    step = 0
    for epoch in range(cfg.stage1.epochs):
        dlae.train()
        for rgb, raw in data.train.batches(cfg.optim.batch_size, order):
            loss_rgb, pred_rgb = _rgb_branch_loss(dlae, rgb, cfg)
            _check_finite(loss_rgb, "rgb loss", step, "best-val state" if best_state else None)
            opt_rgb.zero_grad()
            loss_rgb.backward()
            opt_rgb.step()

            loss_raw, rec, fea, pred_raw = _raw_branch_loss(dlae, rgb, raw, cfg)
            _check_finite(loss_raw, "raw loss", step, "best-val state" if best_state else None)
            opt_raw.zero_grad()
            loss_raw.backward()
            opt_raw.step()

            if cfg.nan_check_every and step % cfg.nan_check_every == 0:
                _check_finite(pred_rgb, "rgb decoder output", step, None)
                _check_finite(pred_raw, "raw decoder output", step, None)
            losses.add(step, "rgb_rec", loss_rgb.item())
            losses.add(step, "raw_rec", rec.item())
            losses.add(step, "fea", fea.item())
            step += 1

        val_rgb, val_raw = validate_stage1(dlae, data.test, cfg)
        sched_rgb.step(val_rgb)
        sched_raw.step(val_raw)
        val = val_rgb + val_raw
        losses.add(step, "val_stage1", val)
        if val < best_val:
            best_val, best_state = val, copy.deepcopy(dlae.state_dict())
            history.append(val)
        log.info("stage1 epoch %d val %.6f", epoch, val)

    dlae.load_state_dict(best_state)
    dlae.eval()
    ckpt = None
    if out_dir:
        ckpt = save_checkpoint(out_dir / "dlae", {"dlae": dlae}, _meta(cfg, "stage1", {"best_val": best_val}))
    return StageResult({"dlae": dlae}, losses, history, ckpt)


@torch.no_grad()
def validate_stage1(dlae: DLAE, split: PairedSplit, cfg: RunConfig) -> tuple[float, float]:
    dlae.eval()
    n, tot_rgb, tot_raw = 0, 0.0, 0.0
    for rgb, raw in split.batches(cfg.optim.batch_size):
        loss_rgb, _ = _rgb_branch_loss(dlae, rgb, cfg)
        loss_raw, *_ = _raw_branch_loss(dlae, rgb, raw, cfg)
        tot_rgb += loss_rgb.item() * len(rgb)
        tot_raw += loss_raw.item() * len(rgb)
        n += len(rgb)
    return tot_rgb / n, tot_raw / n


# -- stage 2 -----------------------------------------------------------------

@torch.no_grad()
def encode_split(dlae: DLAE, split: PairedSplit, batch_size: int = 32):
    """Frozen-encoder latents and pooled RGB features for a whole split."""
    z0s, z1s, fs = [], [], []
    for rgb, raw in split.batches(batch_size):
        z0, f = dlae.encode_rgb(rgb)
        z1, _ = dlae.encode_raw(raw)
        z0s.append(z0)
        z1s.append(z1)
        fs.append(f)
    f_all = [torch.cat([f[i] for f in fs]) for i in range(len(fs[0]))]
    return torch.cat(z0s), torch.cat(z1s), f_all


def train_stage2_dlfm(cfg: RunConfig, dlae: DLAE, data: PairedData,
                      out_dir: str | Path | None = None) -> StageResult:
    """Flow loss only; the autoencoder is frozen and its latents are cached."""
    out_dir = Path(out_dir) if out_dir else None
    seed_everything(cfg.seed + 1)
    dlae.eval()
    set_frozen([dlae], True)
    dlfm = build_dlfm(cfg)
    opt, sched = make_optimizer(dlfm.parameters(), cfg, cfg.stage_lr("stage2"))
    train_z0, train_z1, _ = encode_split(dlae, data.train)
    test_z0, test_z1, _ = encode_split(dlae, data.test)
    order, times = stream(cfg.seed, 2), stream(cfg.seed, 3)
    losses = LossLog(out_dir / "stage2_loss.csv" if out_dir else None)
    bs = cfg.optim.batch_size
    best_state, best_val, history = None, float("inf"), []
    step = 0
    n = len(data.train)
    for epoch in range(cfg.stage2.epochs):
        dlfm.train()
        perm = torch.randperm(n, generator=order)
        for i in range(0, n, bs):
            idx = perm[i:i + bs]
            rgb, z0, z1 = data.train.rgb[idx], train_z0[idx], train_z1[idx]
            guidance = dlfm.extract_context(rgb, z0)
            loss = dlfm.training_loss(z0, z1, guidance, times)
            _check_finite(loss, "flow loss", step, "best-val state" if best_state else None)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.add(step, "flow", loss.item())
            step += 1
        val = validate_flow(dlfm, data.test.rgb, test_z0, test_z1, cfg)
        sched.step(val)
        losses.add(step, "val_flow", val)
        if val < best_val:
            best_val, best_state = val, copy.deepcopy(dlfm.state_dict())
            history.append(val)
        log.info("stage2 epoch %d val %.6f", epoch, val)

    dlfm.load_state_dict(best_state)
    dlfm.eval()
    set_frozen([dlae], False)
    ckpt = None
    if out_dir:
        ckpt = save_checkpoint(out_dir / "dlfm", {"dlfm": dlfm}, _meta(cfg, "stage2", {"best_val": best_val}))
    return StageResult({"dlae": dlae, "dlfm": dlfm}, losses, history, ckpt)


@torch.no_grad()
def validate_flow(dlfm: DLFM, rgb, z0, z1, cfg: RunConfig) -> float:
    """Flow loss on a fixed t / noise draw so the value is comparable across epochs."""
    dlfm.eval()
    gen = stream(cfg.seed, 4)
    total, bs = 0.0, 32
    for i in range(0, len(z0), bs):
        sl = slice(i, i + bs)
        guidance = dlfm.extract_context(rgb[sl], z0[sl])
        total += dlfm.training_loss(z0[sl], z1[sl], guidance, gen).item() * len(z0[sl])
    return total / len(z0)


# -- stage 3 -----------------------------------------------------------------

def end_to_end_loss(pred: torch.Tensor, target: torch.Tensor, lambda_e2e: float = 0.01) -> torch.Tensor:
    """L1 plus weighted perceptual distance on the 3-channel view of packed RAW."""
    loss = F.l1_loss(pred, target)
    if lambda_e2e:
        loss = loss + lambda_e2e * perceptual_distance(raw_to_rgb3(pred), raw_to_rgb3(target))
    return loss


def finetune_end_to_end(cfg: RunConfig, dlae: DLAE, dlfm: DLFM, data: PairedData,
                        out_dir: str | Path | None = None) -> StageResult:
    """Joint update of every component through the truncated Euler chain.

    The state entering this stage counts as the first validation candidate, so
    the retained checkpoint never has a worse held-out loss than stage 2.
    """
    out_dir = Path(out_dir) if out_dir else None
    seed_everything(cfg.seed + 2)
    set_frozen([dlae, dlfm], False)
    params = [p for m in (dlae, dlfm) for p in m.parameters()]
    opt, sched = make_optimizer(params, cfg, cfg.stage_lr("stage3"))
    order = stream(cfg.seed, 5)
    losses = LossLog(out_dir / "stage3_loss.csv" if out_dir else None)
    sc = cfg.sampler

    def snapshot():
        return copy.deepcopy(dlae.state_dict()), copy.deepcopy(dlfm.state_dict())

    best_val = validate_end_to_end(dlae, dlfm, data.test, cfg)
    best_state, history = snapshot(), [best_val]
    losses.add(0, "val_e2e", best_val)
    step = 0
    for epoch in range(cfg.stage3.epochs):
        dlae.train()
        dlfm.train()
        for rgb, raw in data.train.batches(cfg.optim.batch_size, order):
            try:
                pred = reconstruct(rgb, dlae, dlfm, sc.steps, noise_seed=step,
                                   grad_steps=sc.grad_steps, clamp=False)
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), "best-val state") from exc
            loss = end_to_end_loss(pred, raw, cfg.loss.lambda_e2e)
            _check_finite(loss, "end-to-end loss", step, "best-val state")
            opt.zero_grad()
            loss.backward()
            for p in params:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise TrainingDiverged(f"non-finite gradient at step {step}", "best-val state")
            opt.step()
            losses.add(step, "e2e", loss.item())
            step += 1
        val = validate_end_to_end(dlae, dlfm, data.test, cfg)
        sched.step(val)
        losses.add(step, "val_e2e", val)
        if val < best_val:
            best_val, best_state = val, snapshot()
            history.append(val)
        log.info("stage3 epoch %d val %.6f", epoch, val)

    dlae.load_state_dict(best_state[0])
    dlfm.load_state_dict(best_state[1])
    dlae.eval()
    dlfm.eval()
    ckpt = None
    if out_dir:
        ckpt = save_checkpoint(out_dir / "final", {"dlae": dlae, "dlfm": dlfm},
                               _meta(cfg, "stage3", {"best_val": best_val}))
    return StageResult({"dlae": dlae, "dlfm": dlfm}, losses, history, ckpt)


@torch.no_grad()
def validate_end_to_end(dlae: DLAE, dlfm: DLFM, split: PairedSplit, cfg: RunConfig) -> float:
    dlae.eval()
    dlfm.eval()
    total, n = 0.0, 0
    for rgb, raw in split.batches(32):
        pred = reconstruct(rgb, dlae, dlfm, cfg.sampler.steps, clamp=False)
        total += end_to_end_loss(pred, raw, cfg.loss.lambda_e2e).item() * len(rgb)
        n += len(rgb)
    return total / n


# -- evaluation helpers ------------------------------------------------------

@torch.no_grad()
def predict_raw(dlae: DLAE, dlfm: DLFM, rgb: torch.Tensor, steps: int = 20, batch_size: int = 32) -> torch.Tensor:
    dlae.eval()
    dlfm.eval()
    # each batch reuses noise seed 0 for the stochastic variant
    return torch.cat([reconstruct(rgb[i:i + batch_size], dlae, dlfm, steps)
                      for i in range(0, len(rgb), batch_size)])


@torch.no_grad()
def autoencode_raw(dlae: DLAE, split: PairedSplit) -> torch.Tensor:
    dlae.eval()
    out = []
    for rgb, raw in split.batches(32):
        _, f_rgb = dlae.encode_rgb(rgb)
        z, _ = dlae.encode_raw(raw)
        out.append(dlae.decode_raw(z, f_rgb))
    return torch.cat(out)


@torch.no_grad()
def autoencode_rgb(dlae: DLAE, split: PairedSplit) -> torch.Tensor:
    dlae.eval()
    return torch.cat([dlae.decode_rgb(dlae.encode_rgb(rgb)[0]) for rgb, _ in split.batches(32)])


def mean_psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    return float(np.mean([psnr(p.numpy(), t.numpy()) for p, t in zip(pred.double(), target.double())]))


def mean_ssim(pred: torch.Tensor, target: torch.Tensor) -> float:
    return float(np.mean([ssim(p.permute(1, 2, 0).numpy(), t.permute(1, 2, 0).numpy())
                          for p, t in zip(pred.double(), target.double())]))


def to_raw_images(batch: torch.Tensor, bit_depth: int = 12) -> list[RawImage]:
    return [RawImage(x.permute(1, 2, 0).double().numpy(), bit_depth=bit_depth) for x in batch]


def evaluate_models(cfg: RunConfig, dlae: DLAE, dlfm: DLFM, data: PairedData,
                    steps: int | None = None) -> EvalReport:
    pred = predict_raw(dlae, dlfm, data.test.rgb, steps or cfg.sampler.steps)
    return evaluate_set(to_raw_images(pred), to_raw_images(data.test.raw), data.isp,
                        names=data.test.names or None, config_fingerprint=fingerprint(cfg.to_json()))


def run_pipeline(cfg: RunConfig, data: PairedData, out_dir: str | Path | None = None) -> dict:
    """All three stages; returns models, per-stage results and stage-2 / final RAW PSNR."""
    s1 = train_stage1_dlae(cfg, data, out_dir)
    dlae = s1.models["dlae"]
    s2 = train_stage2_dlfm(cfg, dlae, data, out_dir)
    dlfm = s2.models["dlfm"]
    psnr_stage2 = mean_psnr(predict_raw(dlae, dlfm, data.test.rgb, cfg.sampler.steps), data.test.raw)
    s3 = finetune_end_to_end(cfg, dlae, dlfm, data, out_dir)
    return {"dlae": dlae, "dlfm": dlfm, "stage1": s1, "stage2": s2, "stage3": s3,
            "psnr_stage2": psnr_stage2}


# -- ablation grid -----------------------------------------------------------

_FLOW_VARIANTS = {
    "dlfm_cross": ("deterministic", "cross"),
    "sfm_cross": ("stochastic", "cross"),
    "dlfm_single": ("deterministic", "single"),
    "dlfm_latent": ("deterministic", "latent"),
}


@dataclass
class AblationRow:
    variant: str
    seed: int
    scored: str  # "autoencoder", "stage2" or "final"
    psnr_raw: float
    ssim_raw: float


def run_ablation(cfg: RunConfig, data: PairedData, out_dir: str | Path | None = None) -> list[AblationRow]:
    """Train and score every configured variant for every configured seed.

    ``fea_on`` / ``fea_off`` score the RAW autoencoder on held-out pairs. Flow
    variants all start from the same ``fea_on`` autoencoder of their seed and
    differ only in sampler variant and guidance mode.
    """
    out_dir = Path(out_dir) if out_dir else None
    wanted = cfg.ablation.variants
    rows = []
    for seed in cfg.ablation.seeds:
        base = copy.deepcopy(cfg)
        base.seed = seed
        flows = [v for v in wanted if v in _FLOW_VARIANTS]
        dlae_on = None
        if "fea_on" in wanted or flows:
            dlae_on = train_stage1_dlae(base, data).models["dlae"]
        for variant in wanted:
            if variant in ("fea_on", "fea_off"):
                if variant == "fea_on":
                    dlae = dlae_on
                else:
                    off = copy.deepcopy(base)
                    off.loss.lambda_fea = 0.0
                    dlae = train_stage1_dlae(off, data).models["dlae"]
                pred = autoencode_raw(dlae, data.test)
                rows.append(AblationRow(variant, seed, "autoencoder",
                                        mean_psnr(pred, data.test.raw), mean_ssim(pred, data.test.raw)))
                continue
            vcfg = copy.deepcopy(base)
            vcfg.sampler.variant, vcfg.model.guidance = _FLOW_VARIANTS[variant]
            dlae = copy.deepcopy(dlae_on)
            dlfm = train_stage2_dlfm(vcfg, dlae, data).models["dlfm"]
            scored = "stage2"
            if cfg.ablation.finetune:
                finetune_end_to_end(vcfg, dlae, dlfm, data)
                scored = "final"
            pred = predict_raw(dlae, dlfm, data.test.rgb, vcfg.sampler.steps)
            rows.append(AblationRow(variant, seed, scored,
                                    mean_psnr(pred, data.test.raw), mean_ssim(pred, data.test.raw)))
            log.info("ablation %s seed %d psnr %.3f", variant, seed, rows[-1].psnr_raw)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(rows, out_dir / "ablation.csv")
    return rows


def write_ablation_csv(rows: list[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "seed", "scored", "psnr_raw", "ssim_raw"])
        for r in rows:
            writer.writerow([r.variant, r.seed, r.scored, f"{r.psnr_raw:.6f}", f"{r.ssim_raw:.6f}"])
