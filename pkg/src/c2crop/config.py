"""Run configuration: one JSON file with four sections plus output options.

Sections mirror the dataclasses they populate (generator, encoder, train,
loss). Parsing is strict: unknown sections or keys are rejected, and all
dataclass invariants re-validate at parse time. CLI overrides use dotted
``section.key=value`` paths.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import GeneratorConfig
from .losses import LossWeights
from .model import EncoderConfig
from .train import TrainConfig

_SECTIONS = {
    "generator": GeneratorConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "loss": LossWeights,
}
_TOP_KEYS = set(_SECTIONS) | {"out_dir", "manifest"}


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    out_dir: str | None = None
    manifest: str | None = None

    def __post_init__(self):
        if self.generator.image_size != self.encoder.image_size:
            raise ValueError(
                f"generator.image_size ({self.generator.image_size}) and "
                f"encoder.image_size ({self.encoder.image_size}) must match"
            )

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out["encoder"]["head_hidden"] = list(self.encoder.head_hidden)
        out["out_dir"] = self.out_dir
        out["manifest"] = self.manifest
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _build_section(name: str, cls, values: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise ValueError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    if "head_hidden" in values and isinstance(values["head_hidden"], list):
        values = dict(values, head_hidden=tuple(values["head_hidden"]))
    return cls(**values)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"config section '{name}' must be an object")
        kwargs[name] = _build_section(name, cls, dict(section))
    return RunConfig(
        out_dir=raw.get("out_dir"), manifest=raw.get("manifest"), **kwargs
    )


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    return config_from_dict(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` (or ``out_dir=...``) overrides to a raw
    config dict; values parse as JSON with a plain-string fallback."""
    out = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' must look like section.key=value")
        path, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = path.split(".")
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ValueError(f"override path '{path}' has too many components")
    return out
