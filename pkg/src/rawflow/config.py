"""Run configuration: nested dataclasses loaded from one JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from rawflow.data_isp import IspParams


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending dotted paths."""

    def __init__(self, message: str, keys: list[str] | None = None):
        super().__init__(message)
        self.keys = keys or []


@dataclass
class DataConfig:
    num_pairs: int = 200
    size: tuple[int, int] = (64, 64)
    train_fraction: float = 0.85
    test_fraction: float = 0.15
    seed: int = 0
    isp: IspParams = field(default_factory=IspParams)


@dataclass
class ModelConfig:
    latent_channels: int = 8
    ae_width: int = 16
    inject_rgb: bool = True
    align_layers: list[int] = field(default_factory=lambda: [0, 1])
    flow_width: int = 32
    flow_scales: int = 3
    time_embed_dim: int = 64
    guidance: str = "cross"  # cross | single | latent | none
    guidance_width: int = 32


@dataclass
class LossConfig:
    lambda_perceptual: float = 0.01  # weight of the phi term in the autoencoder losses
    lambda_fea: float = 0.1
    lambda_e2e: float = 0.01  # weight of the phi term in the end-to-end loss


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    batch_size: int = 8


@dataclass
class StageConfig:
    epochs: int = 1
    lr: float | None = None  # falls back to OptimConfig.lr


@dataclass
class SamplerConfig:
    steps: int = 20
    variant: str = "deterministic"  # deterministic | stochastic
    grad_steps: int = 5  # Euler steps kept on the autograd tape during fine-tuning

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler.steps must be >= 1", ["sampler.steps"])
        if self.variant not in ("deterministic", "stochastic"):
            raise ConfigError(f"unknown sampler variant {self.variant!r}", ["sampler.variant"])


ABLATION_VARIANTS = (
    "fea_on",  # autoencoder trained with the alignment term
    "fea_off",  # same budget with lambda_fea = 0
    "dlfm_cross",
    "sfm_cross",  # stochastic (noise-source) flow
    "dlfm_single",
    "dlfm_latent",
)


@dataclass
class AblationConfig:
    variants: list[str] = field(default_factory=lambda: list(ABLATION_VARIANTS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    finetune: bool = False  # run stage 3 for every flow variant before scoring


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(epochs=200))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(epochs=100))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(epochs=10))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    nan_check_every: int = 50

    def validate(self) -> RunConfig:
        bad = []
        bad += [f"loss.{f.name}" for f in dataclasses.fields(self.loss) if getattr(self.loss, f.name) < 0]
        if self.optim.lr <= 0:
            bad.append("optim.lr")
        for name in ("stage1", "stage2", "stage3"):
            stage = getattr(self, name)
            if stage.epochs < 1:
                bad.append(f"{name}.epochs")
            if stage.lr is not None and stage.lr <= 0:
                bad.append(f"{name}.lr")
        if abs(self.data.train_fraction + self.data.test_fraction - 1.0) > 1e-9:
            bad += ["data.train_fraction", "data.test_fraction"]
        if self.data.num_pairs < 2:
            bad.append("data.num_pairs")
        if self.model.guidance not in ("cross", "single", "latent", "none"):
            bad.append("model.guidance")
        if not self.model.align_layers or any(l not in (0, 1) for l in self.model.align_layers):
            bad.append("model.align_layers")
        if self.optim.batch_size < 1:
            bad.append("optim.batch_size")
        if not self.ablation.variants or any(v not in ABLATION_VARIANTS for v in self.ablation.variants):
            bad.append("ablation.variants")
        if not self.ablation.seeds:
            bad.append("ablation.seeds")
        if bad:
            raise ConfigError(f"invalid config values: {', '.join(bad)}", bad)
        return self

    def stage_lr(self, stage: str) -> float:
        lr = getattr(self, stage).lr
        return self.optim.lr if lr is None else lr

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"]["isp"] = self.data.isp.to_dict()
        d["data"]["size"] = list(self.data.size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _build(cls, values: Any, prefix: str):
    if cls is IspParams:
        if not isinstance(values, dict):
            raise ConfigError(f"{prefix} must be an object", [prefix])
        allowed = {f.name for f in dataclasses.fields(IspParams)}
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}", [f"{prefix}.{k}" for k in unknown])
        try:
            return IspParams(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{prefix}: {exc}", [prefix]) from exc
    if not dataclasses.is_dataclass(cls):
        return values
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object", [prefix])
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        keys = [f"{prefix}.{k}" if prefix else k for k in unknown]
        raise ConfigError(f"unknown config keys: {keys}", keys)
    kwargs = {}
    defaults = cls()
    for name, value in values.items():
        sub = getattr(defaults, name)
        path = f"{prefix}.{name}" if prefix else name
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, path)
        else:
            kwargs[name] = tuple(value) if isinstance(sub, tuple) else value
    return cls(**kwargs)


def from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values, "").validate()


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load a JSON config (or defaults when ``path`` is None) and apply ``key=value`` overrides."""
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    base = RunConfig().to_dict()
    _merge(base, values)
    for item in overrides or []:
        apply_override(base, item)
    return from_dict(base)


def _merge(dst: dict, src: dict, prefix: str = "") -> None:
    for key, value in src.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in dst:
            raise ConfigError(f"unknown config key {path!r}", [path])
        if isinstance(dst[key], dict) and isinstance(value, dict):
            _merge(dst[key], value, path)
        else:
            dst[key] = value


def apply_override(values: dict, item: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value", [item])
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = values
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}", [key])
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}", [key])
    node[parts[-1]] = value
