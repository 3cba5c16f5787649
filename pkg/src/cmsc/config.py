"""Configuration dataclasses and the plain-text ``key = value`` config format.

A config file is a sequence of lines ``key = value``; ``#`` starts a comment
and ``[section]`` headers are accepted but ignored (keys are globally unique).
Lists are comma separated.  Unknown keys are an error.

Example::

    # desk-scale experiment
    [scene]
    num_cavs = 2
    [train]
    stage1_steps = 2000
    [experiment]
    snr_list = 0, 4, 8, 12, 16, 20
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

from cmsc.errors import ContractError

MODALITIES = ("lidar", "camera")


@dataclass
class SceneConfig:
    height: int = 32
    width: int = 32
    channels: int = 16
    min_objects: int = 3
    max_objects: int = 8
    min_size: float = 2.0
    max_size: float = 4.0
    max_gt_iou: float = 0.0
    max_retries: int = 200
    num_cavs: int = 2
    cav_min_distance: float = 10.0
    cav_max_distance: float = 14.0
    sensing_range: float = 11.0
    visibility_softness: float = 0.25
    latent_mixing_scale: float = 0.8
    mixing_seed: int = 20240611
    lidar_sigma: float = 1.0
    lidar_noise: float = 0.02
    camera_sigma: float = 1.0
    camera_sigma_range: float = 3.0
    camera_noise: float = 0.08
    camera_depth_std: float = 1.0


@dataclass
class ModelConfig:
    se_reduction: int = 4
    convnext_kernel: int = 7
    convnext_expansion: int = 4
    codec_kernel: int = 3
    symbol_clip: float = 3.0
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    init_seed: int = 0


@dataclass
class TrainConfig:
    eta: float = 2.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    mu: float = 1.0
    lr_pretrain: float = 1e-3
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    lr_stage3: float = 1e-4
    lr_upper: float = 1e-3
    pretrain_steps: int = 1500
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    stage3_steps: int = 1000
    upper_steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    stage2_channel: str = "rayleigh"
    train_snr_min: float = 0.0
    train_snr_max: float = 20.0
    train_lambdas: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.04, 0.06, 0.1, 0.2])
    train_baseline_jscc: bool = True

    def __post_init__(self) -> None:
        for name in ("eta", "alpha", "beta", "gamma", "mu"):
            if getattr(self, name) < 0:
                msg = f"loss weight {name} must be >= 0, got {getattr(self, name)}"
                raise ContractError(msg)
        if self.stage2_channel != "rayleigh":
            msg = f"stage-2 training runs over a rayleigh channel, got {self.stage2_channel!r}"
            raise ContractError(msg)


@dataclass
class ExperimentConfig:
    methods: list[str] = field(default_factory=lambda: [
        "cmsc", "baseline_jscc", "baseline_16qam", "baseline_256qam", "upper_bound"])
    channel: str = "awgn"
    snr_list: list[float] = field(default_factory=lambda: [float(s) for s in range(0, 21, 2)])
    lambda_: float = 0.06
    lambda_list: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.04, 0.06, 0.1, 0.2])
    ego_modality: str = "lidar"
    cav_modalities: str = "random"
    scenes: int = 200
    seed: int = 0
    parity: bool = True
    code_rate: float = 0.5
    eval_batch: int = 50


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def sections(self):
        return {"scene": self.scene, "model": self.model, "train": self.train,
                "experiment": self.experiment}

    def to_text(self) -> str:
        lines = []
        for sname, section in self.sections().items():
            lines.append(f"[{sname}]")
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, list):
                    value = ", ".join(_fmt(v) for v in value)
                else:
                    value = _fmt(value)
                lines.append(f"{_key(f.name)} = {value}")
        return "\n".join(lines) + "\n"


def _key(name: str) -> str:
    return "lambda" if name == "lambda_" else name


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, typ, key: str):
    origin = get_origin(typ)
    try:
        if origin is list:
            (inner,) = get_args(typ)
            return [_coerce(p.strip(), inner, key) for p in raw.split(",") if p.strip()]
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return typ(raw)
    except ValueError:
        msg = f"config key {key!r}: cannot parse {raw!r} as {typ}"
        raise ContractError(msg) from None


def parse_config(text: str, base: Config | None = None) -> Config:
    base = base if base is not None else Config()
    cfg = Config(**{k: dataclasses.replace(v) for k, v in base.sections().items()})
    index = {}
    for sname, section in cfg.sections().items():
        hints = get_type_hints(type(section))
        for f in fields(section):
            index[_key(f.name)] = (section, f.name, hints[f.name])
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            msg = f"config line {lineno}: expected 'key = value', got {line!r}"
            raise ContractError(msg)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in index:
            msg = f"config line {lineno}: unknown key {key!r}"
            raise ContractError(msg)
        section, attr, typ = index[key]
        setattr(section, attr, _coerce(raw, typ, key))
    cfg.train.__post_init__()
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    return parse_config(Path(path).read_text())
