"""Experiment configuration and its flat ``section.key = value`` text form.

Values are JSON where they parse as JSON and bare strings otherwise, so a
snapshot written by :func:`dumps` reads back to an equal config.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .datagen import CorpusSpec
from .separator import SeparatorConfig
from .training import TrainConfig

SPLITS = ("train", "val", "test")


@dataclass
class DataConfig:
    num_train: int = 2000
    num_val: int = 200
    num_test: int = 200
    duration_s: float = 2.0
    sample_rate: int = 8000
    k_min: int = 2
    k_max: int = 2
    noise_snr_range_db: Optional[tuple[float, float]] = None
    rms_range_db: tuple[float, float] = (-25.0, -15.0)
    seed: int = 0

    def __post_init__(self):
        self.split_spec("train")  # validates the shared fields

    def split_spec(self, split: str) -> CorpusSpec:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        i = SPLITS.index(split)
        return CorpusSpec(
            num_examples=getattr(self, f"num_{split}"),
            duration_s=self.duration_s,
            sample_rate=self.sample_rate,
            k_min=self.k_min,
            k_max=self.k_max,
            noise_snr_range_db=self.noise_snr_range_db,
            # disjoint seed streams per split
            seed=3 * self.seed + i,
            rms_range_db=self.rms_range_db,
        )


@dataclass
class EvalConfig:
    split: str = "test"
    batch_size: int = 16

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: SeparatorConfig = field(default_factory=SeparatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def validate(self) -> None:
        from .training import check_compatible

        self.train.validate()
        check_compatible(self.train, self.model)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(train={"epochs": 2})``; re-validates each touched section."""
        out = self
        for name, values in sections.items():
            if name == "output_dir":
                out = replace(out, output_dir=values)
            else:
                out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out


_SECTIONS = ("data", "model", "train", "eval")


def _encode(value) -> str:
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def _decode(text: str):
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        return text
    return tuple(value) if isinstance(value, list) else value


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        for k, v in asdict(getattr(cfg, section)).items():
            lines.append(f"{section}.{k} = {_encode(v)}")
    lines.append(f"output_dir = {_encode(cfg.output_dir)}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse the flat format; keys not present keep their ``base`` (default) values."""
    base = base or ExperimentConfig()
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    output_dir = base.output_dir
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "output_dir":
            output_dir = str(_decode(value))
            continue
        section, _, name = key.partition(".")
        if section not in updates:
            raise ValueError(f"line {lineno}: unknown section in {key!r}")
        known = {f.name for f in fields(getattr(base, section))}
        if name not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _decode(value)
    return base.with_overrides(**{s: u for s, u in updates.items() if u}, output_dir=output_dir)


def load(path: str | Path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
