"""Run configuration: a YAML file validated into frozen dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoder import ConfigurationError, EncoderConfig

LABEL_SOURCES = ("teacher", "gold", "generated")
LOSSES = ("soft", "hard")
GENERATORS = ("rule", "cloze")


@dataclass(frozen=True)
class DataConfig:
    dir: str | None = None  # None: write the bundled synthetic datasets
    n_passages: int = 64


@dataclass(frozen=True)
class GeneratorSection:
    kind: str = "rule"
    questions_per_passage: int = 10
    nucleus_p: float = 0.6
    unique_answers: bool = False


@dataclass(frozen=True)
class TeacherSection:
    epochs: int = 2
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    heldout_fraction: float = 0.1
    n_gold_passages: int = 768


@dataclass(frozen=True)
class DistillSection:
    labels: str = "teacher"
    loss: str = "soft"
    epochs: int = 2
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    top_k: int = 8
    init_from_teacher: bool = True


@dataclass(frozen=True)
class ParaphraseSection:
    l2_lambda: float = 1.0
    fine_tune_epochs: int = 20
    fine_tune_lr: float = 1e-4
    output_lr_factor: float = 1e3


@dataclass(frozen=True)
class NerSection:
    epochs: int = 5
    lr: float = 5e-4
    types: tuple[str, ...] = ("person", "location", "organization")


@dataclass(frozen=True)
class SentimentSection:
    prompts: str | None = None  # None: the bundled six prompt pairs
    domain: str = "movie"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    encoder: dict = field(default_factory=dict)  # EncoderConfig fields except vocab_size
    data: DataConfig = DataConfig()
    generator: GeneratorSection = GeneratorSection()
    teacher: TeacherSection = TeacherSection()
    distill: DistillSection = DistillSection()
    paraphrase: ParaphraseSection = ParaphraseSection()
    ner: NerSection = NerSection()
    sentiment: SentimentSection = SentimentSection()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        cfg = EncoderConfig(vocab_size=vocab_size, **self.encoder)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **sections) -> "RunConfig":
        """Override fields, e.g. ``replace(seed=3, distill={"loss": "hard"})``."""
        out = self
        for name, value in sections.items():
            if isinstance(value, dict):
                value = dataclasses.replace(getattr(out, name), **value) \
                    if dataclasses.is_dataclass(getattr(out, name)) else {**getattr(out, name), **value}
            out = dataclasses.replace(out, **{name: value})
        validate(out)
        return out


def config_hash(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


_SECTIONS = {"data": DataConfig, "generator": GeneratorSection, "teacher": TeacherSection,
             "distill": DistillSection, "paraphrase": ParaphraseSection, "ner": NerSection,
             "sentiment": SentimentSection}


def _section(cls, raw, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {unknown}")
    if "types" in raw:
        raw = {**raw, "types": tuple(raw["types"])}
    return cls(**raw)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    unknown = sorted(set(raw) - {"seed", "encoder", *_SECTIONS})
    if unknown:
        raise ConfigurationError(f"unknown config keys: {unknown}")
    if "seed" not in raw or not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigurationError("an integer seed is required")
    encoder = dict(raw.get("encoder") or {})
    enc_fields = {f.name for f in dataclasses.fields(EncoderConfig)} - {"vocab_size"}
    if set(encoder) - enc_fields:
        raise ConfigurationError(f"unknown encoder keys: {sorted(set(encoder) - enc_fields)}")
    cfg = RunConfig(seed=raw["seed"], encoder=encoder,
                    **{name: _section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.distill.labels not in LABEL_SOURCES:
        raise ConfigurationError(f"distill.labels must be one of {LABEL_SOURCES}")
    if cfg.distill.loss not in LOSSES:
        raise ConfigurationError(f"distill.loss must be one of {LOSSES}")
    if cfg.generator.kind not in GENERATORS:
        raise ConfigurationError(f"generator.kind must be one of {GENERATORS}")
    if cfg.data.dir is not None and not Path(cfg.data.dir).is_dir():
        raise ConfigurationError(f"data.dir {cfg.data.dir!r} does not exist")
    if cfg.sentiment.prompts is not None and not Path(cfg.sentiment.prompts).is_file():
        raise ConfigurationError(f"sentiment.prompts {cfg.sentiment.prompts!r} does not exist")
    if cfg.data.n_passages < 1 or cfg.teacher.n_gold_passages < 2:
        raise ConfigurationError("need at least one passage and two gold passages")
    cfg.encoder_config(vocab_size=8)


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read a YAML config (or the defaults); ``seed`` overrides the file's seed."""
    if path is None:
        raw = {"seed": 0}
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if seed is not None:
        raw = {**raw, "seed": seed}
    return from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
