"""Run configuration: one JSON document, validated strictly.

Sections: ``backbone``, ``data``, ``train``, ``eval``. Unknown keys are
rejected, and every problem found is reported in one error. Command-line
flags override document values; the fully resolved document is snapshotted
into each run directory so runs can be reproduced from the snapshot alone.

The data root may be omitted and supplied via the ``DERMPROBE_DATA_ROOT``
environment variable instead.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

DATA_ROOT_ENV = "DERMPROBE_DATA_ROOT"


@dataclass
class BackboneSection:
    kind: str = "toy"  # "toy" | "pretrained"
    resolution: int = 64
    base_channels: int = 32
    seed: int = 7
    train_steps: int = 0
    checkpoint: str | None = None


@dataclass
class DataSection:
    root: str | None = None
    metadata: str = "metadata.csv"
    plan_seed: int = 0
    plan: str | None = None  # load an existing plan file verbatim


@dataclass
class TrainSection:
    subset_percent: int = 5
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    block: int = 6
    timestep: int = 100
    seg_blocks: list[int] = field(default_factory=lambda: [6, 8])
    seg_timestep: int = 100
    seg_max_pixels_per_image: int | None = None


@dataclass
class EvalSection:
    threshold_mode: str = "youden"
    split: str = "test"
    kmeans_k: int = 3
    kmeans_seed: int = 0


_SECTIONS = {
    "backbone": BackboneSection,
    "data": DataSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    backbone: BackboneSection
    data: DataSection
    train: TrainSection
    eval: EvalSection

    def document(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def resolved_root(self) -> Path:
        root = self.data.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(
                [f"data.root not set and {DATA_ROOT_ENV} is not in the environment"]
            )
        return Path(root)


def _build_section(name: str, cls, values: dict, problems: list[str]):
    section = cls()
    known = set(section.__dataclass_fields__)
    for key, value in values.items():
        if key not in known:
            problems.append(f"{name}.{key}: unknown key")
            continue
        setattr(section, key, value)
    return section


def validate_config(document: dict) -> RunConfig:
    """Build a RunConfig, collecting every problem before failing."""
    problems: list[str] = []
    if not isinstance(document, dict):
        raise ConfigError(["config document must be a JSON object"])
    for key in document:
        if key not in _SECTIONS:
            problems.append(f"{key}: unknown section")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = document.get(name, {})
        if not isinstance(values, dict):
            problems.append(f"{name}: must be an object")
            values = {}
        sections[name] = _build_section(name, cls, values, problems)

    bb, tr, ev = sections["backbone"], sections["train"], sections["eval"]
    if bb.kind not in ("toy", "pretrained"):
        problems.append(f"backbone.kind: must be 'toy' or 'pretrained', got {bb.kind!r}")
    if bb.kind == "pretrained" and not bb.checkpoint:
        problems.append("backbone.checkpoint: required when backbone.kind is 'pretrained'")
    if tr.subset_percent not in (5, 10, 15, 20):
        problems.append(f"train.subset_percent: must be 5, 10, 15 or 20, got {tr.subset_percent!r}")
    if ev.threshold_mode not in ("youden", "accuracy"):
        problems.append(f"eval.threshold_mode: must be 'youden' or 'accuracy', got {ev.threshold_mode!r}")
    if ev.split not in ("validation", "test"):
        problems.append(f"eval.split: must be 'validation' or 'test', got {ev.split!r}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(**sections)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a config file and apply {'section.key': value} overrides."""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config file {path} is not valid JSON: {exc}"])
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        document.setdefault(section, {})[key] = value
    return validate_config(document)
