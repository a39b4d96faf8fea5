"""Run configuration, presets and JSON (de)serialisation."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    dim: int = 64
    layers: int = 2
    heads: int = 2
    mlp_ratio: int = 4
    n_max: int = 16
    roi_k: int = 3
    roi_samples: int = 2
    inst_tokens: int = 2
    vocab_size: int = 64

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_grid(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return 1 + self.n_grid + self.n_max


@dataclass
class MaskConfig:
    ratio: float = 0.4
    min_block: int = 4
    max_block: int | None = None


@dataclass
class TokenizerConfig:
    kind: str = "vq"
    iterations: int = 30
    train_images: int = 128
    max_cells: int = 20000
    cell_size: int | None = None  # codebook cell side in pixels; None -> patch size


@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 0


@dataclass
class AugmentSettings:
    enabled: bool = True
    crop_scale: tuple[float, float] = (0.6, 1.0)
    hflip: float = 0.5
    vflip: float = 0.5
    color_jitter: float = 0.4


@dataclass
class DataConfig:
    pretrain_path: str | None = None
    labeled_path: str | None = None
    pretrain_images: int = 512
    labeled_images: int = 240
    nuclei_per_image: tuple[int, int] = (4, 10)
    n_classes: int = 4
    train_fraction: float = 0.5
    schedule: list[dict] = field(default_factory=list)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    inst_loss_weight: float = 1.0
    use_inst_loss: bool = True


@dataclass
class ProbeConfig:
    l2: float = 1e-3
    max_iter: int = 500


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_steps: int = 16
    init_from_probe: bool = True
    class_weighting: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0
    precision: str = "float32"

    def validate(self) -> "RunConfig":
        m = self.model
        if m.dim % 8:
            raise ConfigError("model.dim", f"{m.dim} is not divisible by 8")
        if m.dim % m.heads:
            raise ConfigError("model.heads", f"dim {m.dim} is not divisible by {m.heads} heads")
        if m.image_size % m.patch_size:
            raise ConfigError("model.image_size", f"{m.image_size} is not divisible by patch size {m.patch_size}")
        if (32 % m.inst_tokens) or m.inst_tokens < 1:
            raise ConfigError("model.inst_tokens", "must divide the 32-pixel nucleus crop")
        if not 0.0 <= self.mask.ratio < 1.0:
            raise ConfigError("mask.ratio", f"{self.mask.ratio} outside [0, 1)")
        if self.mask.min_block < 1 or self.mask.min_block > m.n_grid:
            raise ConfigError("mask.min_block", f"{self.mask.min_block} outside [1, {m.n_grid}]")
        if self.tokenizer.kind not in ("vq", "luminance"):
            raise ConfigError("tokenizer.kind", f"unknown tokenizer {self.tokenizer.kind!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision", f"unknown precision {self.precision!r}")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _merge(obj, updates: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in updates.items():
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown field")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ConfigError(f"{prefix}{key}", "expected an object")
            _merge(cur, val, f"{prefix}{key}.")
        else:
            if isinstance(cur, tuple) and isinstance(val, list):
                val = tuple(val)
            setattr(obj, key, val)


def from_dict(d: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    _merge(cfg, d, "")
    return cfg.validate()


def desk_preset() -> RunConfig:
    return RunConfig().validate()


def paper_preset() -> RunConfig:
    cfg = RunConfig()
    cfg.model = ModelConfig(image_size=448, patch_size=16, dim=768, layers=12, heads=12, n_max=256,
                            roi_k=3, inst_tokens=2, vocab_size=8192)
    cfg.mask = MaskConfig(ratio=0.4, min_block=16, max_block=None)
    cfg.train = TrainConfig(epochs=800, batch_size=96)
    cfg.tokenizer = TokenizerConfig(kind="vq", iterations=30, train_images=4096, max_cells=500_000)
    return cfg.validate()


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Resolve a preset (argument, else the file's ``"preset"`` key, else desk) plus file and overrides."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
    name = preset or raw.pop("preset", None) or "desk"
    raw.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}")
    cfg = from_dict(raw, PRESETS[name]())
    if overrides:
        cfg = from_dict(overrides, cfg)
    return cfg
