"""Run configuration: plain dataclasses, JSON round-trip, dotted overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

FILTER_MODES = ("off", "low", "high", "full")


@dataclass
class GsfmConfig:
    input_size: tuple[int, int] = (64, 64)
    encoder_stride: int = 4
    key_channels: int = 16
    value_channels: int = 32
    base_channels: int = 8
    lfm_mode: str = "low"          # encoder filter: off / low / high / full
    hfm_mode: str = "high"         # decoder filter: off / low / high / full
    boundary_branch: bool = True
    lfm_sigma: float = 7.0
    hfm_sigma: float = 7.0
    share_lfm_weights: bool = False
    top_k: int = 50
    memorize_every: int = 3
    boundary_loss_weight: float = 0.05

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        h, w = self.input_size
        s = self.encoder_stride
        if s < 1 or s & (s - 1):
            raise ValueError("encoder_stride must be a power of two")
        if h % s or w % s:
            raise ValueError(f"stride {s} does not divide input size {self.input_size}")
        for name in ("key_channels", "value_channels", "base_channels", "top_k", "memorize_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lfm_mode", "hfm_mode"):
            if getattr(self, name) not in FILTER_MODES:
                raise ValueError(f"{name} must be one of {FILTER_MODES}")
        if self.lfm_sigma <= 0 or self.hfm_sigma <= 0:
            raise ValueError("cutoff sigmas must be positive")

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.input_size[0] // self.encoder_stride, self.input_size[1] // self.encoder_stride


@dataclass
class SynthConfig:
    size: int = 64
    length: int = 12
    num_shapes: int = 1
    distractor_count: int = 2
    color_jitter: float = 0.05     # max per-channel distractor/target colour gap
    min_extent: int = 12
    max_extent: int = 20
    max_speed: float = 2.0
    jitter: float = 0.5
    occlusion: bool = False
    noise: float = 0.02
    seed: int = 0


@dataclass
class TrainConfig:
    pretrain_steps: int = 40
    main_steps: int = 260
    batch_size: int = 4
    lr: float = 2e-3
    lr_decay_at: float = 0.75
    optimizer: str = "adam"
    bootstrap_final: float = 0.2
    bootstrap_anneal: float = 0.25
    train_top_k: int | None = None   # None: full softmax during training
    key_init_std: float | None = 3.0  # rescale the key projection to this key std before training
    checkpoint_every: int = 100
    log_every: int = 1


@dataclass
class DataConfig:
    root: str = "data/synth"
    num_train: int = 200
    num_eval: int = 50
    eval_limit: int | None = None


@dataclass
class RunConfig:
    model: GsfmConfig = field(default_factory=GsfmConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    jobs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _build(cls, d: dict):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in d.items():
        if key not in names:
            raise KeyError(f"unknown config key {cls.__name__}.{key}")
        sub = _NESTED.get((cls.__name__, key))
        kwargs[key] = _build(sub, value) if sub is not None and isinstance(value, dict) else value
    return cls(**kwargs)


_NESTED = {
    ("RunConfig", "model"): GsfmConfig,
    ("RunConfig", "synth"): SynthConfig,
    ("RunConfig", "train"): TrainConfig,
    ("RunConfig", "data"): DataConfig,
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b=value`` overrides; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        node = d
        parts = path.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config section {path!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {path!r}")
        node[parts[-1]] = _parse_value(raw)
    return RunConfig.from_dict(d)
