"""Command-line entry point: ``rawflow <command> [options]``.

Every command writes ``config.json`` (the fully resolved configuration) into
its ``--out`` directory. Exit codes: 0 success, 2 config, 3 data, 4 numeric,
5 io.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from rawflow import raster
from rawflow.config import ConfigError, RunConfig, from_dict, load_config
from rawflow.data_isp import (
    DimensionError,
    IspParams,
    RawImage,
    from_codes,
    generate_dataset,
    load_dataset,
    render_rgb,
    split_names,
    to_codes,
)
from rawflow.dlfm import NonFiniteError
from rawflow.metrics import evaluate_set, fingerprint
from rawflow.nn_core import ShapeError, to_nchw
from rawflow.trainer import (
    PairedData,
    TrainingDiverged,
    build_dlae,
    build_dlfm,
    evaluate_models,
    finetune_end_to_end,
    load_checkpoint,
    predict_raw,
    run_ablation,
    train_stage1_dlae,
    train_stage2_dlfm,
)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5

log = logging.getLogger("rawflow")


class DataError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. --set stage1.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int, help="Euler steps K")
    common.add_argument("--variant", choices=["deterministic", "stochastic"])
    common.add_argument("--guidance", choices=["cross", "single", "latent"])
    common.add_argument("--out", type=Path, required=True, help="output directory")

    p = argparse.ArgumentParser(prog="rawflow", description="RGB-to-RAW reconstruction with latent flow matching")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render a synthetic paired dataset")

    s = sub.add_parser("train-dlae", parents=[common], help="stage 1: dual-domain autoencoder")
    s.add_argument("--data", type=Path, required=True)

    s = sub.add_parser("train-dlfm", parents=[common], help="stage 2: flow with frozen autoencoder")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--dlae", type=Path, required=True, help="stage-1 checkpoint directory")

    for name, text in (("finetune", "stage 3: end-to-end fine-tuning"),
                       ("infer", "reconstruct RAW from RGB rasters"),
                       ("eval", "score predictions on the held-out split")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--ckpt", type=Path, help="checkpoint holding both networks")
        s.add_argument("--dlae", type=Path)
        s.add_argument("--dlfm", type=Path)
        if name in ("finetune", "eval"):
            s.add_argument("--data", type=Path, required=True)
        if name == "infer":
            s.add_argument("--input", type=Path, required=True, help="RGB .rt file or directory of *_rgb.rt")
        if name == "eval":
            s.add_argument("--pred", type=Path, help="directory of predicted *_raw.rt instead of a checkpoint")

    s = sub.add_parser("ablate", parents=[common], help="train and score the ablation grid")
    s.add_argument("--data", type=Path, required=True)
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"sampler.steps={args.steps}")
    if args.variant:
        overrides.append(f'sampler.variant="{args.variant}"')
    if args.guidance:
        overrides.append(f'model.guidance="{args.guidance}"')
    return load_config(args.config, overrides)


def _checkpoint_config(directory: Path) -> RunConfig:
    try:
        index = json.loads((directory / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read checkpoint index in {directory}: {exc}") from exc
    return from_dict(index["config"])


def _load_dlae(directory: Path):
    dlae = build_dlae(_checkpoint_config(directory))
    load_checkpoint(directory, {"dlae": dlae})
    return dlae


def _load_dlfm(directory: Path):
    dlfm = build_dlfm(_checkpoint_config(directory))
    load_checkpoint(directory, {"dlfm": dlfm})
    return dlfm


def _load_pair(args):
    """(dlae, dlfm) from ``--ckpt`` or from separate ``--dlae`` / ``--dlfm`` directories."""
    if args.ckpt:
        return _load_dlae(args.ckpt), _load_dlfm(args.ckpt)
    if not (args.dlae and args.dlfm):
        raise ConfigError("pass --ckpt, or both --dlae and --dlfm", ["--ckpt"])
    return _load_dlae(args.dlae), _load_dlfm(args.dlfm)


def _load_data(root: Path) -> PairedData:
    if not (root / "manifest.json").exists():
        raise DataError(f"{root} is not a dataset (no manifest.json)")
    return PairedData.load(root)


def _rgb_inputs(path: Path) -> list[Path]:
    files = sorted(path.glob("*_rgb.rt")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"no *_rgb.rt rasters in {path}")
    return files


def _read_rgb(path: Path, isp: IspParams) -> np.ndarray:
    arr = raster.read_raster(path)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"{path} is not an HxWx3 RGB raster (shape {arr.shape})")
    return from_codes(arr, isp.rgb_bit_depth) if arr.dtype == np.uint16 else arr.astype(np.float64)


def write_ppm(path: Path, rgb8: np.ndarray) -> None:
    """Binary PPM (P6) preview from HxWx3 uint8-range codes."""
    h, w, _ = rgb8.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb8.astype(np.uint8).tobytes())


def cmd_gen_data(args, cfg: RunConfig) -> None:
    generate_dataset(cfg.data, args.out)


def cmd_train_dlae(args, cfg: RunConfig) -> None:
    train_stage1_dlae(cfg, _load_data(args.data), args.out)


def cmd_train_dlfm(args, cfg: RunConfig) -> None:
    dlae = _load_dlae(args.dlae)
    train_stage2_dlfm(cfg, dlae, _load_data(args.data), args.out)


def cmd_finetune(args, cfg: RunConfig) -> None:
    dlae, dlfm = _load_pair(args)
    finetune_end_to_end(cfg, dlae, dlfm, _load_data(args.data), args.out)


def cmd_infer(args, cfg: RunConfig) -> None:
    dlae, dlfm = _load_pair(args)
    isp = cfg.data.isp
    for path in _rgb_inputs(args.input):
        rgb = to_nchw([_read_rgb(path, isp)])
        packed = predict_raw(dlae, dlfm, rgb, cfg.sampler.steps)[0].permute(1, 2, 0).double().numpy()
        stem = path.name.removesuffix(".rt").removesuffix("_rgb")
        raster.write_raster(args.out / f"{stem}_raw.rt", to_codes(packed, isp.raw_bit_depth))
        preview = render_rgb(RawImage(packed, bit_depth=isp.raw_bit_depth), isp)
        write_ppm(args.out / f"{stem}_preview.ppm", to_codes(preview.data, 8))
        log.info("wrote %s", stem)


def cmd_eval(args, cfg: RunConfig) -> None:
    data_root = args.data
    if not (data_root / "manifest.json").exists():
        raise DataError(f"{data_root} is not a dataset (no manifest.json)")
    if args.pred:
        _, gts, isp = load_dataset(data_root, "test")
        names = split_names(data_root, "test")
        preds = []
        for name in names:
            f = args.pred / f"{name}_raw.rt"
            if not f.exists():
                raise DataError(f"missing prediction {f}")
            preds.append(RawImage(from_codes(raster.read_raster(f), isp.raw_bit_depth), bit_depth=isp.raw_bit_depth))
        report = evaluate_set(preds, gts, isp, names, fingerprint(cfg.to_json()))
    else:
        dlae, dlfm = _load_pair(args)
        report = evaluate_models(cfg, dlae, dlfm, PairedData.load(data_root), cfg.sampler.steps)
    report.write_csv(args.out / "eval.csv")
    report.write_json(args.out / "eval.json")
    log.info("mean psnr_raw %.3f ssim_raw %.4f", report.mean["psnr_raw"], report.mean["ssim_raw"])


def cmd_ablate(args, cfg: RunConfig) -> None:
    run_ablation(cfg, _load_data(args.data), args.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-dlae": cmd_train_dlae,
    "train-dlfm": cmd_train_dlfm,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _configure_logging() -> None:
    level = os.environ.get("RAWFLOW_LOG", "info").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING, "warning": logging.WARNING}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        cfg.save(args.out / "config.json")
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        keys = f" [{', '.join(exc.keys)}]" if exc.keys else ""
        print(f"config error: {exc}{keys}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, DimensionError, ShapeError, raster.RasterFormatError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
