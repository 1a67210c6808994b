"""Experiment configuration and its ``key = value`` text format.

Keys are dotted ``section.field`` names; ``#`` starts a comment. Sections:
``corpus`` (SyntheticConfig), ``model`` (ModelConfig without vocab_size and
mode), ``train`` (baseline TrainHyper), ``finetune`` (fine-tuning TrainHyper),
``loss`` (LossSpec), ``schedule`` (ScheduleSpec) and ``experiment`` (the
fields of ExperimentConfig itself).
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .corpus import SyntheticConfig
from .loss import LossSpec
from .trainer import ScheduleSpec, TrainHyper


@dataclass
class ModelShape:
    d_model: int = 64
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_len: int = 64


def _finetune_default():
    return TrainHyper()


@dataclass
class ExperimentSettings:
    seed: int = 1
    test_docs: int = 50
    test_seed: int = 1001
    align_iterations: int = 5
    align_null: bool = False
    random_context_seed: int = 77
    average_last: int = 10
    decode_max_len: int = 40
    unaligned_is_mismatch: bool = True


@dataclass
class ExperimentConfig:
    corpus: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelShape = field(default_factory=ModelShape)
    train: TrainHyper = field(default_factory=TrainHyper)
    finetune: TrainHyper = field(default_factory=_finetune_default)
    loss: LossSpec = field(default_factory=LossSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    SECTIONS = ("corpus", "model", "train", "finetune", "loss", "schedule", "experiment")

    def replace(self, **sections):
        return dataclasses.replace(self, **sections)

    def to_text(self) -> str:
        lines = []
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if isinstance(value, (tuple, list)):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{sec}.{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self, *sections) -> str:
        """Hash of the named sections (all when none given)."""
        keep = sections or self.SECTIONS
        text = "\n".join(l for l in self.to_text().splitlines() if l.split(".", 1)[0] in keep)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


class ConfigError(ValueError):
    pass


def _coerce(raw: str, current, key: str):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None, source: str = "<config>") -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    updates = {sec: {} for sec in ExperimentConfig.SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        sec, _, name = key.partition(".")
        if sec not in updates or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        obj = getattr(cfg, sec)
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        updates[sec][name] = _coerce(value, getattr(obj, name), f"{source}:{lineno}: {key}")
    new = {}
    for sec, vals in updates.items():
        try:
            new[sec] = dataclasses.replace(getattr(cfg, sec), **vals) if vals else getattr(cfg, sec)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{source}: section {sec}: {err}") from None
    try:
        new["corpus"].validate()
    except ValueError as err:
        raise ConfigError(f"{source}: corpus: {err}") from None
    return ExperimentConfig(**new)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base, source=str(path))


def reference_page() -> str:
    """Markdown listing of every config key with its default."""
    cfg = ExperimentConfig()
    out = ["# Configuration keys", "", "| key | default |", "| --- | --- |"]
    for line in cfg.to_text().splitlines():
        k, _, v = line.partition(" = ")
        out.append(f"| `{k}` | `{v}` |")
    return "\n".join(out) + "\n"
