"""Run configuration: typed dataclasses, presets, and JSON round-trip.

A RunConfig fully determines a run together with the seed. Every CLI
command resolves its configuration (preset, then optional config file,
then flag overrides), validates it, and echoes the result to
``config.json`` in the output directory so reruns are reproducible.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import CorpusSpec, TAG_NAMES
from .errors import ConfigError


@dataclass
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    n_rounds: int = 3
    n_layers: int = 3
    grid: int = 8
    patch: int = 2
    channels: int = 1
    tag_vocab: int = 12
    n_tags_select: int = 4
    max_len: int = 96
    keep_prob: float = 1.0
    norm_mode: str = "mcln"
    memory_slots: int = 3
    tie_output: bool = False
    use_alignment: bool = True
    dtype: str = "f32"

    @property
    def n_regions(self) -> int:
        return (self.grid // self.patch) ** 2

    def validate(self) -> None:
        if self.d < 2 or self.d % 2 != 0:
            raise ConfigError(f"model width must be a positive even number, got {self.d}")
        if self.n_heads < 1 or self.d % self.n_heads != 0:
            raise ConfigError(f"width {self.d} must divide evenly into {self.n_heads} heads")
        if self.n_rounds < 1:
            raise ConfigError(f"n_rounds must be at least 1, got {self.n_rounds}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be at least 1, got {self.n_layers}")
        if self.patch < 1 or self.grid % self.patch != 0:
            raise ConfigError(f"grid {self.grid} must be divisible by patch {self.patch}")
        if not (1 <= self.n_tags_select <= self.tag_vocab):
            raise ConfigError(f"n_tags_select must lie in [1, {self.tag_vocab}], got {self.n_tags_select}")
        if self.tag_vocab > len(TAG_NAMES):
            raise ConfigError(f"tag_vocab cannot exceed {len(TAG_NAMES)}, got {self.tag_vocab}")
        if not (0.0 < self.keep_prob <= 1.0):
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.norm_mode not in ("plain", "mcln"):
            raise ConfigError(f"norm_mode must be 'plain' or 'mcln', got {self.norm_mode!r}")
        if self.memory_slots < 1:
            raise ConfigError(f"memory_slots must be positive, got {self.memory_slots}")
        if self.max_len < 4:
            raise ConfigError(f"max_len must allow at least BOS/EOS framing, got {self.max_len}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    lambda_tag: float = 0.5
    teacher_tags_frac: float = 0.5
    tag_pretrain_epochs: int = 0
    eval_every: int = 1
    patience: int = 0
    seed: int = 42

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs cannot be negative, got {self.epochs}")
        if self.tag_pretrain_epochs < 0:
            raise ConfigError(
                f"tag_pretrain_epochs cannot be negative, got {self.tag_pretrain_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not (0.0 <= beta < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {beta}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip cannot be negative, got {self.grad_clip}")
        if self.lambda_tag < 0:
            raise ConfigError(f"lambda_tag cannot be negative, got {self.lambda_tag}")
        if not (0.0 <= self.teacher_tags_frac <= 1.0):
            raise ConfigError(f"teacher_tags_frac must lie in [0, 1], got {self.teacher_tags_frac}")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every cannot be negative, got {self.eval_every}")
        if self.patience < 0:
            raise ConfigError(f"patience cannot be negative, got {self.patience}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.model.validate()
        self.corpus.validate()
        self.train.validate()
        if self.model.tag_vocab != self.corpus.tag_vocab:
            raise ConfigError(
                f"model tag_vocab {self.model.tag_vocab} != corpus tag_vocab {self.corpus.tag_vocab}")
        if self.model.grid != self.corpus.grid or self.model.channels != self.corpus.channels:
            raise ConfigError("model grid/channels must match the corpus spec")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["corpus"]["split"] = list(d["corpus"]["split"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        cfg = RunConfig()
        for section_name, cls in (("model", ModelConfig), ("corpus", CorpusSpec), ("train", TrainConfig)):
            section = raw.get(section_name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {section_name!r} must be an object")
            known = {f.name for f in fields(cls)}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"unknown keys in {section_name!r}: {sorted(unknown)}")
            target = getattr(cfg, section_name)
            for key, val in section.items():
                if key == "split":
                    val = tuple(float(v) for v in val)
                setattr(target, key, val)
        extra = set(raw) - {"model", "corpus", "train"}
        if extra:
            raise ConfigError(f"unknown top-level config keys: {sorted(extra)}")
        return cfg


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return RunConfig.from_dict(raw)


def desk_preset() -> RunConfig:
    """Small configuration that trains in minutes on a CPU."""
    return RunConfig()


def paper_preset() -> RunConfig:
    """Full-scale configuration (d=512, 8 heads, 49 regions, 10 tags).

    Constructible and runnable, but sized for real accelerators rather
    than a desk CPU.
    """
    cfg = RunConfig()
    cfg.model = ModelConfig(
        d=512, n_heads=8, n_rounds=3, n_layers=3,
        grid=14, patch=2, channels=1,
        tag_vocab=12, n_tags_select=10,
        max_len=96, keep_prob=0.9, norm_mode="mcln",
    )
    cfg.corpus = CorpusSpec(count=704, grid=14, channels=1, tag_vocab=12)
    cfg.train = TrainConfig(epochs=100)
    return cfg


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def resolve_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()
