"""Acceptance criteria, one test each; each registers a PASS/FAIL line.

A few post-training checks share the toy run of criterion 6.

The toy-scale runs (criteria 6 and 7) use ``configs/toy.json`` and
``configs/ablation.json`` and take tens of minutes on one CPU core.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record_acceptance
from fdcheck import grad_rel_error, weighted_sum
from rawflow import raster
from rawflow.config import load_config
from rawflow.data_isp import generate_dataset, mosaic, pack_rggb, unpack_rggb
from rawflow.dlae import DLAE, feature_alignment_loss, reconstruction_loss
from rawflow.dlfm import euler_integrate, flow_loss, interpolate
from rawflow.metrics import psnr, ssim
from rawflow.nn_core import (
    Downsample,
    ResBlock,
    TimeEmbedding,
    UNet,
    Upsample,
    UNetSpec,
    perceptual_distance,
    phi_features,
)
from rawflow.trainer import (
    PairedData,
    PairedSplit,
    autoencode_raw,
    autoencode_rgb,
    encode_split,
    evaluate_models,
    finetune_end_to_end,
    mean_psnr,
    predict_raw,
    run_ablation,
    run_pipeline,
    seed_everything,
    train_stage1_dlae,
    train_stage2_dlfm,
)
from test_metrics import brute_force_ssim

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def check(number: int, passed: bool, detail: str) -> None:
    record_acceptance(number, bool(passed), detail)
    assert passed, detail


def test_01_interpolation_endpoints():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(1)
    exact = True
    for _ in range(100):
        shape = tuple(int(s) for s in torch.randint(1, 9, (4,), generator=gen))
        z0, z1 = torch.randn(shape, generator=gen), torch.randn(shape, generator=gen)
        exact &= torch.equal(interpolate(z0, z1, 0.0), z0) and torch.equal(interpolate(z0, z1, 1.0), z1)
    elapsed = time.perf_counter() - start
    check(1, exact and elapsed < 1.0, f"endpoints exact on 100 shapes: {exact}, {elapsed:.3f}s")


def test_02_constant_field_euler():
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(2)
    z0 = torch.randn(2, 8, 8, 8, generator=gen, dtype=torch.float64)
    z1 = torch.randn(2, 8, 8, 8, generator=gen, dtype=torch.float64)
    v = z1 - z0
    errors = {}
    for k in (1, 5, 20, 100):
        z = euler_integrate(z0, lambda z, t: v, steps=k)
        errors[k] = ((z - z1).norm() / z1.norm()).item()
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    check(2, worst <= 1e-5 and elapsed < 1.0, f"max rel L2 error {worst:.2e} over K={list(errors)}, {elapsed:.3f}s")


def test_03_euler_order():
    start = time.perf_counter()
    one = torch.ones(1, dtype=torch.float64)
    z10 = euler_integrate(one, lambda z, t: -z, steps=10).item()
    closed = abs(z10 - 0.3486784401)
    errs = [abs(euler_integrate(one, lambda z, t: -z, steps=k).item() - math.exp(-1)) for k in (10, 20, 40, 80)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    halving = all(1.6 <= r <= 2.4 for r in ratios)
    elapsed = time.perf_counter() - start
    check(3, closed <= 1e-12 and halving and elapsed < 1.0,
          f"|z_10 - 0.9^10| = {closed:.1e}; error ratios {', '.join(f'{r:.3f}' for r in ratios)}; {elapsed:.3f}s")


def _module_error(module, inputs, params_only=False, **kw):
    module = module.double()
    xs = [x.double().requires_grad_(not params_only) for x in inputs]
    tensors = ([] if params_only else xs) + list(module.parameters())
    return grad_rel_error(lambda: weighted_sum(module(*xs, **kw)), tensors, max_entries=20)


def test_04_gradient_suite(float64):
    start = time.perf_counter()
    torch.manual_seed(0)
    probe = lambda *s: torch.rand(*s)  # noqa: E731
    a, b = probe(2, 4, 8, 8).requires_grad_(), probe(2, 4, 8, 8)
    a3, b3 = probe(2, 3, 8, 8).requires_grad_(), probe(2, 3, 8, 8)
    fa = [probe(1, 5, 8, 8).requires_grad_(), probe(1, 6, 4, 4).requires_grad_()]
    fb = [probe(1, 5, 8, 8), probe(1, 6, 4, 4)]
    spec = UNetSpec(3, 3, base_width=8, num_scales=3, time_embed_dim=8, guidance_channels=[2, 0, 2])
    unet = UNet(spec).double()
    torch.nn.init.normal_(unet.head.weight, std=0.1)  # a zero head would hide upstream gradients
    x, t = probe(1, 3, 8, 8).requires_grad_(), torch.tensor([0.4])
    g = [probe(1, 2, 8, 8).requires_grad_(), None, probe(1, 2, 2, 2).requires_grad_()]
    img = probe(1, 3, 8, 8).requires_grad_()

    errors = {
        "flow_loss": grad_rel_error(lambda: flow_loss(a, b), [a]),
        "feature_alignment_loss": grad_rel_error(lambda: feature_alignment_loss(fa, fb), fa),
        "reconstruction_loss_raw": grad_rel_error(lambda: reconstruction_loss(a, b, 0.01), [a]),
        "reconstruction_loss_rgb": grad_rel_error(lambda: reconstruction_loss(a3, b3, 0.5), [a3]),
        "perceptual_distance": grad_rel_error(lambda: perceptual_distance(a3, b3), [a3]),
        "phi_features": grad_rel_error(
            lambda: sum(weighted_sum(f, seed=i) for i, f in enumerate(phi_features(img))), [img]),
        "ResBlock": _module_error(ResBlock(3, 5, temb_dim=4), [probe(2, 3, 8, 8), torch.randn(2, 4)]),
        "ResBlock_identity": _module_error(ResBlock(4, 4), [probe(1, 4, 8, 8)]),
        "Downsample": _module_error(Downsample(3, 4), [probe(1, 3, 8, 8)]),
        # times are data; a 1e-3 step at frequency 1e4 is meaningless, so only weights are probed
        "TimeEmbedding": _module_error(TimeEmbedding(8), [torch.rand(3)], params_only=True),
        "Upsample": _module_error(Upsample(3, 2), [probe(1, 3, 8, 8)]),
        "UNet": grad_rel_error(lambda: weighted_sum(unet(x, t, g)), [x, g[0], g[2]] + list(unet.parameters())),
    }
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 120
    check(4, ok, f"{len(errors)} probes, worst {worst} rel err {errors[worst]:.2e}, {elapsed:.1f}s")


@pytest.mark.slow
def test_05_single_pair_overfit(tmp_path):
    start = time.perf_counter()
    # one pair at batch 1 makes every epoch a single step; patience 200 keeps the toy run's
    # spacing of roughly 200 optimizer steps between learning-rate halvings
    cfg = load_config(CONFIGS / "toy.json", ["data.num_pairs=4", "stage2.epochs=2000", "optim.batch_size=1",
                                             "optim.plateau_patience=200"])
    generate_dataset(cfg.data, tmp_path)
    full = PairedData.load(tmp_path)
    pair = PairedSplit(full.train.rgb[:1], full.train.raw[:1])
    data = PairedData(pair, pair, full.isp)
    seed_everything(cfg.seed)
    dlae = DLAE(cfg.model.latent_channels, cfg.model.ae_width, cfg.model.align_layers, cfg.model.inject_rgb)
    result = train_stage2_dlfm(cfg, dlae, data)
    dlfm = result.models["dlfm"]
    flow = result.log.values("flow")
    initial = flow[0]
    below = next((i for i, v in enumerate(flow) if v < 0.01 * initial), None)
    z0, z1, _ = encode_split(dlae, pair)
    with torch.no_grad():
        guidance = dlfm.extract_context(pair.rgb, z0)
        z = euler_integrate(z0, dlfm.field(guidance), cfg.sampler.steps)
    rel = ((z - z1).norm() / z1.norm()).item()
    elapsed = time.perf_counter() - start
    ok = below is not None and below < 2000 and rel < 0.05 and elapsed < 600
    check(5, ok, f"flow loss < 1% of initial at step {below}, final/initial {flow[-1] / initial:.2e}; "
                 f"sampled-latent rel L2 {rel:.4f}; {elapsed:.0f}s")


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    cfg = load_config(CONFIGS / "toy.json")
    root = tmp_path_factory.mktemp("toy200")
    generate_dataset(cfg.data, root)
    return PairedData.load(root)


def mean_raw_floor(data: PairedData) -> float:
    """PSNR of predicting the training-set mean RAW for every held-out image."""
    mean = data.train.raw.mean(dim=0, keepdim=True).expand_as(data.test.raw)
    return mean_psnr(mean, data.test.raw)


@pytest.fixture(scope="module")
def toy_run(toy_data):
    """The three stages on the toy set, with stage-1 and stage-2 measurements taken on the way."""
    start = time.perf_counter()
    cfg = load_config(CONFIGS / "toy.json")
    dlae = train_stage1_dlae(cfg, toy_data).models["dlae"]
    ae_raw = mean_psnr(autoencode_raw(dlae, toy_data.test), toy_data.test.raw)
    ae_rgb = mean_psnr(autoencode_rgb(dlae, toy_data.test), toy_data.test.rgb)
    with torch.no_grad():
        z_rgb = dlae.encode_rgb(toy_data.test.rgb)[0]
    dlfm = train_stage2_dlfm(cfg, dlae, toy_data).models["dlfm"]
    psnr_stage2 = mean_psnr(predict_raw(dlae, dlfm, toy_data.test.rgb, cfg.sampler.steps), toy_data.test.raw)
    finetune_end_to_end(cfg, dlae, dlfm, toy_data)
    report = evaluate_models(cfg, dlae, dlfm, toy_data)
    return {
        "report": report, "elapsed": time.perf_counter() - start, "ae_raw": ae_raw, "ae_rgb": ae_rgb,
        "z_rgb": z_rgb, "psnr_stage2": psnr_stage2,
    }


@pytest.mark.slow
def test_06_toy_end_to_end(toy_data, toy_run):
    assert len(toy_data.train) == 170 and len(toy_data.test) == 30
    report = toy_run["report"]
    p, s = report.mean["psnr_raw"], report.mean["ssim_raw"]
    floor = mean_raw_floor(toy_data)
    elapsed = toy_run["elapsed"]
    ok = p >= 28.0 and s >= 0.90 and p >= floor + 10.0 and elapsed <= 7200
    check(6, ok, f"held-out RAW PSNR {p:.2f} dB, SSIM {s:.4f}, mean-image floor {floor:.2f} dB, "
                 f"{elapsed / 60:.1f} min")


@pytest.mark.slow
def test_finetune_does_not_regress(toy_run):
    final = toy_run["report"].mean["psnr_raw"]
    print(f"stage 2 {toy_run['psnr_stage2']:.2f} dB -> fine-tuned {final:.2f} dB")
    assert final >= toy_run["psnr_stage2"]


@pytest.mark.slow
def test_distinct_images_have_distinct_latents(toy_run):
    z = toy_run["z_rgb"].flatten(1)
    assert torch.cdist(z, z).add(torch.eye(len(z)) * 1e9).min() > 0


@pytest.mark.slow
def test_autoencoder_round_trip_psnr(toy_run):
    print(f"stage-1 round trip: RAW {toy_run['ae_raw']:.2f} dB, RGB {toy_run['ae_rgb']:.2f} dB")
    assert toy_run["ae_raw"] >= 35.0
    assert toy_run["ae_rgb"] >= 35.0


@pytest.mark.slow
def test_07_ablation_directions(toy_data, tmp_path):
    start = time.perf_counter()
    cfg = load_config(CONFIGS / "ablation.json")
    rows = run_ablation(cfg, toy_data, tmp_path)
    table = {(r.variant, r.seed): r.psnr_raw for r in rows}
    seeds = cfg.ablation.seeds

    def mean(variant):
        return float(np.mean([table[variant, s] for s in seeds]))

    det_wins = sum(table["dlfm_cross", s] > table["sfm_cross", s] for s in seeds)
    table3 = det_wins >= 2 and mean("dlfm_cross") > mean("sfm_cross")
    table4 = mean("dlfm_cross") > mean("dlfm_latent")
    table2 = mean("fea_on") > mean("fea_off")
    elapsed = time.perf_counter() - start
    detail = (
        f"det {mean('dlfm_cross'):.2f} vs stoch {mean('sfm_cross'):.2f} dB (wins {det_wins}/{len(seeds)}) "
        f"[{'ok' if table3 else 'FAIL'}]; cross {mean('dlfm_cross'):.2f} / single {mean('dlfm_single'):.2f} "
        f"/ latent {mean('dlfm_latent'):.2f} dB [{'ok' if table4 else 'FAIL'}]; AE fea on {mean('fea_on'):.2f} "
        f"vs off {mean('fea_off'):.2f} dB [{'ok' if table2 else 'FAIL'}]; {elapsed / 60:.1f} min"
    )
    check(7, table2 and table3 and table4, detail)


def test_08_metric_oracles():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        a = rng.random((32, 32, 3))
        b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - brute_force_ssim(a, b)))
    x, y = np.zeros((10, 10)), np.zeros((10, 10))
    y[3, 7] = 1.0  # MSE = 1/100, exactly the double nearest 0.01
    db = psnr(x, y)
    check(8, worst <= 1e-6 and db == 20.0,
          f"SSIM max deviation from brute force {worst:.1e} on 10 fixtures; PSNR(MSE=0.01) = {db!r} dB")


def _tiny_run(root: Path):
    cfg = load_config(CONFIGS / "tiny.json")
    generate_dataset(cfg.data, root / "data")
    data = PairedData.load(root / "data")
    run = run_pipeline(cfg, data, root / "run")
    evaluate_models(cfg, run["dlae"], run["dlfm"], data).write_csv(root / "run" / "eval.csv")
    return {p.relative_to(root / "run"): p.read_bytes() for p in sorted((root / "run").rglob("*")) if p.is_file()}


@pytest.mark.slow
def test_09_determinism(tmp_path):
    first = _tiny_run(tmp_path / "a")
    second = _tiny_run(tmp_path / "b")
    same = first.keys() == second.keys() and all(first[k] == second[k] for k in first)
    n_ckpt = sum(1 for k in first if k.suffix == ".rt")
    diff = [str(k) for k in first if first.get(k) != second.get(k)]
    check(9, same and n_ckpt > 0 and Path("eval.csv") in first,
          f"{len(first)} artifacts ({n_ckpt} checkpoint tensors + logs + eval.csv) "
          f"{'byte-identical' if same else 'differ: ' + ', '.join(diff[:5])}")


def test_10_format_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    arrays = [
        rng.standard_normal((5, 7)).astype(np.float32),
        rng.integers(0, 4096, (8, 6, 4)).astype(np.uint16),
        np.array([np.nan, np.inf, -0.0], dtype=np.float32),
        rng.random((3, 2, 2, 2)).astype(np.float32),
    ]
    files_ok = True
    for i, arr in enumerate(arrays):
        path = tmp_path / f"a{i}.rt"
        raster.write_raster(path, arr)
        back = raster.read_raster(path)
        files_ok &= back.dtype == arr.dtype and back.tobytes() == arr.tobytes()
        files_ok &= raster.encode_raster(back) == path.read_bytes()
    packs_ok = True
    for _ in range(1000):
        h, w = 2 * rng.integers(1, 9, size=2)
        bayer = mosaic(rng.random((h, w, 3)))
        packs_ok &= np.array_equal(unpack_rggb(pack_rggb(bayer)), bayer)
        packed = rng.random((h // 2, w // 2, 4))
        packs_ok &= np.array_equal(pack_rggb(unpack_rggb(packed)), packed)
    check(10, files_ok and packs_ok,
          f".rt bit-identical for {len(arrays)} rasters: {files_ok}; pack/unpack exact on 1000 mosaics: {packs_ok}")
