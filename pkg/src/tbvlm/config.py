"""Model and run configuration records, presets, and validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised with the dotted path of the first offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


N_PATHOLOGIES = 6


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 16
    d_vision: int = 32
    d_text: int = 32
    d_fused: int = 32
    d_decoder: int = 32
    vision_layers: int = 2
    vision_heads: int = 4
    text_layers: int = 2
    text_heads: int = 4
    fusion_layers: int = 2
    fusion_heads: int = 4
    decoder_layers: int = 2
    decoder_heads: int = 4
    vocab_size: int = 256
    max_text_len: int = 64
    max_report_len: int = 64
    ffn_mult: int = 4
    n_pathologies: int = N_PATHOLOGIES
    ln_eps: float = 1e-5
    init_std: float = 0.02

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    def validate(self, prefix: str = "model") -> "ModelConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (not isinstance(v, int) or isinstance(v, bool)):
                raise ConfigError(f"{prefix}.{f.name}", f"expected an integer, got {v!r}")
        positive = ("image_size", "patch_size", "d_vision", "d_text", "d_fused", "d_decoder",
                    "vocab_size", "max_text_len", "max_report_len", "ffn_mult", "n_pathologies")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError(f"{prefix}.image_size",
                              f"{self.image_size} is not divisible by patch_size {self.patch_size}")
        if not self.d_text == self.d_vision == self.d_fused:
            raise ConfigError(f"{prefix}.d_fused",
                              "d_text, d_vision and d_fused must be equal (fusion has no projection)")
        for stack, width in (("vision", self.d_vision), ("text", self.d_text),
                             ("fusion", self.d_fused), ("decoder", self.d_decoder)):
            layers = getattr(self, f"{stack}_layers")
            heads = getattr(self, f"{stack}_heads")
            if layers < 0:
                raise ConfigError(f"{prefix}.{stack}_layers", "must be >= 0")
            if layers > 0 and heads < 1:
                raise ConfigError(f"{prefix}.{stack}_heads", "must be >= 1 when the stack has layers")
            if layers > 0 and width % heads:
                raise ConfigError(f"{prefix}.{stack}_heads",
                                  f"width {width} is not divisible by {heads} heads")
        if self.vocab_size < 6:
            raise ConfigError(f"{prefix}.vocab_size", "must hold the 6 reserved tokens")
        if self.max_text_len < 2 or self.max_report_len < 2:
            raise ConfigError(f"{prefix}.max_text_len", "sequences need room for BOS and EOS")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "model") -> "ModelConfig":
        return _build(cls, d, prefix).validate(prefix)


TOY = ModelConfig()

PAPER_SHAPE = ModelConfig(
    image_size=224, patch_size=16,
    d_vision=768, d_text=768, d_fused=768, d_decoder=1024,
    vision_layers=12, vision_heads=12,
    text_layers=12, text_heads=12,
    fusion_layers=12, fusion_heads=12,
    decoder_layers=24, decoder_heads=16,
    vocab_size=32000, max_text_len=128, max_report_len=128,
)


@dataclass(frozen=True)
class DataConfig:
    n_images: int = 2000
    split: tuple = (0.8, 0.1, 0.1)
    noise: float = 0.03
    prevalence: float = 0.25
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mim_ratio: float = 0.25
    mlm_ratio: float = 0.15
    w_mim: float = 1.0
    w_mlm: float = 1.0
    w_caption: float = 1.0
    w_vqa: float = 1.0
    w_detect: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    split: str = "test"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        self.model.validate("model")
        d = self.data
        if d.n_images < 1:
            raise ConfigError("data.n_images", "must be >= 1")
        if len(d.split) != 3 or any(r < 0 for r in d.split) or abs(sum(d.split) - 1.0) > 1e-9:
            raise ConfigError("data.split", f"three non-negative ratios summing to 1, got {list(d.split)}")
        if not 0.0 <= d.noise:
            raise ConfigError("data.noise", "must be >= 0")
        if not 0.1 <= d.prevalence <= 1.0:
            raise ConfigError("data.prevalence", "must lie in [0.1, 1]")
        for stage in ("pretrain", "finetune"):
            t = getattr(self, stage)
            if t.steps < 0:
                raise ConfigError(f"{stage}.steps", "must be >= 0")
            if t.batch_size < 1:
                raise ConfigError(f"{stage}.batch_size", "must be >= 1")
            if t.learning_rate < 0:
                raise ConfigError(f"{stage}.learning_rate", "must be >= 0")
            for name in ("mim_ratio", "mlm_ratio"):
                if not 0.0 < getattr(t, name) <= 1.0:
                    raise ConfigError(f"{stage}.{name}", "must lie in (0, 1]")
        if not 0.0 <= self.eval.threshold <= 1.0:
            raise ConfigError("eval.threshold", "must lie in [0, 1]")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split", "must be one of train/val/test")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"]["split"] = list(self.data.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)} - {"preset"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
        base = preset(d.get("preset", "toy"))
        model = {**base.model.to_dict(), **d.get("model", {})}
        data = d.get("data", {})
        if "split" in data:
            data = {**data, "split": tuple(data["split"])}
        cfg = cls(
            model=_build(ModelConfig, model, "model"),
            data=_build(DataConfig, {**dataclasses.asdict(base.data), **data}, "data"),
            pretrain=_build(TrainConfig, {**dataclasses.asdict(base.pretrain), **d.get("pretrain", {})}, "pretrain"),
            finetune=_build(TrainConfig, {**dataclasses.asdict(base.finetune), **d.get("finetune", {})}, "finetune"),
            eval=_build(EvalConfig, {**dataclasses.asdict(base.eval), **d.get("eval", {})}, "eval"),
            paths=dict(d.get("paths", {})),
        )
        return cfg.validate()


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(prefix, "expected an object")
    names = {f.name: f for f in fields(cls)}
    for key, value in d.items():
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
        expected = names[key].type
        if expected in ("int", int) and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(f"{prefix}.{key}", f"expected an integer, got {value!r}")
        if expected in ("float", float) and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ConfigError(f"{prefix}.{key}", f"expected a number, got {value!r}")
        if expected in ("str", str) and not isinstance(value, str):
            raise ConfigError(f"{prefix}.{key}", f"expected a string, got {value!r}")
    return cls(**{k: (float(v) if names[k].type in ("float", float) else v) for k, v in d.items()})


def preset(name: str) -> RunConfig:
    if name == "toy":
        # the shared encoder must localise within 2000 steps while also serving
        # the decoder: a faster rate and a heavier detection term get it there
        return RunConfig(finetune=TrainConfig(learning_rate=1e-3, w_detect=10.0))
    if name == "paper-shape":
        return RunConfig(model=PAPER_SHAPE, data=DataConfig(n_images=1),
                         pretrain=TrainConfig(steps=0), finetune=TrainConfig(steps=0))
    raise ConfigError("preset", f"unknown preset {name!r} (toy, paper-shape)")


def load_config(path_or_preset: str | Path) -> RunConfig:
    """Load a JSON run config, or a built-in preset by name."""
    if str(path_or_preset) in ("toy", "paper-shape"):
        return preset(str(path_or_preset)).validate()
    try:
        text = Path(path_or_preset).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path_or_preset}: {exc}") from exc
    try:
        raw: Any = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)
