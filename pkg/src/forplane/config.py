"""Configuration dataclasses and the flat dotted-key JSON config format.

Every tunable named in the module contracts lives here. On disk a config is a
flat JSON object whose keys are "section.field" strings, e.g.

    {"encoding.bins": 8, "loss.lambda_tv": 0.001, "planes.levels": [8, 16]}

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any


@dataclass
class PlaneConfig:
    levels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    feature_dim: int = 16
    # 0 means "one node per training frame", resolved when the dataset is known
    time_res: int = 0
    # multiply: one D-wide product over all 6*L planes (Algorithm-1 semantics)
    # concat: per-level products concatenated to an L*D-wide feature
    level_fusion: str = "multiply"
    # static planes start in [1-static_init_spread, 1+static_init_spread]
    static_init_spread: float = 0.1
    # 0 keeps dynamic planes at exactly 1; nonzero is the w/o-disentangle
    # ablation's random initialization
    dynamic_init_spread: float = 0.0

    def validate(self) -> None:
        if len(self.levels) < 1 or any(n < 2 for n in self.levels):
            raise ConfigError("planes.levels must list spatial resolutions >= 2")
        if self.feature_dim < 1:
            raise ConfigError("planes.feature_dim must be positive")
        if self.level_fusion not in ("multiply", "concat"):
            raise ConfigError("planes.level_fusion must be 'multiply' or 'concat'")


@dataclass
class EncodingConfig:
    kind: str = "oneblob"  # oneblob | frequency | dummy
    bins: int = 16
    sigma: float = 1.0 / 16.0
    octaves: int = 4

    def validate(self) -> None:
        if self.kind not in ("oneblob", "frequency", "dummy"):
            raise ConfigError("encoding.kind must be oneblob, frequency or dummy")
        if self.bins < 2:
            raise ConfigError("encoding.bins must be >= 2")
        if self.sigma <= 0:
            raise ConfigError("encoding.sigma must be > 0")
        if self.octaves < 0:
            raise ConfigError("encoding.octaves must be >= 0")


@dataclass
class MlpConfig:
    kind: str = "tiny"  # tiny: 2 ReLU layers of 64 | large: 8 ReLU layers of 256
    hidden_features: int = 15  # width of the sigma->color feature handoff

    def validate(self) -> None:
        if self.kind not in ("tiny", "large"):
            raise ConfigError("mlp.kind must be 'tiny' or 'large'")
        if self.hidden_features < 1:
            raise ConfigError("mlp.hidden_features must be positive")


@dataclass
class RenderConfig:
    train_steps: int = 128
    eval_steps: int = 512
    jitter: bool = True  # stratified jitter of training samples
    normalize_depth: bool = False  # divide expected depth by opacity
    t_min: float = 1e-4  # transmittance floor for early termination

    def validate(self) -> None:
        if self.train_steps < 1 or self.eval_steps < 1:
            raise ConfigError("render step counts must be >= 1")
        if not (0 < self.t_min < 1):
            raise ConfigError("render.t_min must be in (0, 1)")


@dataclass
class OccupancyConfig:
    dims: list[int] = field(default_factory=lambda: [64, 64, 64, 8])
    ema: float = 0.95
    update_every: int = 16
    # n_probes = total cells // probes_divisor
    probes_divisor: int = 32
    warmup: int = 256
    # tau_occ = threshold_alpha * steps / (far - near): cells contributing less
    # than ~threshold_alpha opacity per training step count as empty
    threshold_alpha: float = 0.01
    # density_cache starts at init_scale * tau_occ (occupied, clears after a
    # couple of zero-density probes)
    init_scale: float = 1.1

    def validate(self) -> None:
        if len(self.dims) != 4 or any(g < 1 for g in self.dims):
            raise ConfigError("occupancy.dims must be four positive integers")
        if not (0 < self.ema <= 1):
            raise ConfigError("occupancy.ema must be in (0, 1]")
        if self.update_every < 1:
            raise ConfigError("occupancy.update_every must be >= 1")
        if self.init_scale < 1.0:
            raise ConfigError("occupancy.init_scale must be >= 1 (grid starts occupied)")


@dataclass
class SamplerConfig:
    kind: str = "spatiotemporal"  # spatiotemporal | naive | endonerf
    alpha: float = 0.1
    beta: float = 1.0
    window: int = 25

    def validate(self) -> None:
        if self.kind not in ("spatiotemporal", "naive", "endonerf"):
            raise ConfigError("sampler.kind must be spatiotemporal, naive or endonerf")
        if self.alpha <= 0 or self.beta <= 0 or self.window < 1:
            raise ConfigError("sampler.alpha/beta must be > 0 and window >= 1")


@dataclass
class LossConfig:
    lambda_d: float = 1.0
    lambda_tv: float = 0.001
    lambda_ts: float = 0.05
    lambda_de: float = 0.001
    huber_delta: float = 0.2
    depth_mode: str = "stereo"  # stereo | monocular | none

    def validate(self) -> None:
        if min(self.lambda_d, self.lambda_tv, self.lambda_ts, self.lambda_de) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ConfigError("loss.huber_delta must be > 0")
        if self.depth_mode not in ("stereo", "monocular", "none"):
            raise ConfigError("loss.depth_mode must be stereo, monocular or none")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_rays: int = 1024
    seed: int = 0
    lr_planes: float = 1e-2
    lr_mlp: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lr_final: float = 0.1  # cosine decay floor as a fraction of the base lr
    checkpoint_every: int = 0  # 0: final checkpoint only
    log_every: int = 100
    split: str = "alternate"  # alternate | all

    def validate(self) -> None:
        if self.iterations < 1 or self.batch_rays < 1:
            raise ConfigError("train.iterations and train.batch_rays must be >= 1")
        if self.split not in ("alternate", "all"):
            raise ConfigError("train.split must be 'alternate' or 'all'")
        if not (0 < self.lr_final <= 1):
            raise ConfigError("train.lr_final must be in (0, 1]")


@dataclass
class Config:
    planes: PlaneConfig = field(default_factory=PlaneConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    occupancy: OccupancyConfig = field(default_factory=OccupancyConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "Config":
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()
        return self

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for section in dataclasses.fields(self):
            sub = getattr(self, section.name)
            for f in dataclasses.fields(sub):
                flat[f"{section.name}.{f.name}"] = getattr(sub, f.name)
        return flat

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def config_from_flat(flat: dict[str, Any], base: Config | None = None) -> Config:
    """Build a Config from a flat {"section.field": value} mapping."""
    cfg = base if base is not None else Config()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for key, value in flat.items():
        sec_name, _, field_name = key.partition(".")
        if not field_name or sec_name not in sections:
            raise ConfigError(f"unknown config key: {key!r}")
        sub = sections[sec_name]
        names = {f.name for f in dataclasses.fields(sub)}
        if field_name not in names:
            raise ConfigError(f"unknown config key: {key!r}")
        setattr(sub, field_name, value)
    return cfg.validate()


def load_config(path: str, base: Config | None = None) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            flat = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_flat(flat, base)


def save_config(cfg: Config, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps() + "\n")
