"""Default hyperparameters and the key=value config-file loader.

A config file is structured text: one ``key=value`` pair per line, ``#``
comments allowed. Keys use dotted sections matching the dataclass fields,
e.g. ``codec.lambda_mel=0.5`` or ``synth.vocab_size=48``; unknown keys are
an error so typos fail fast.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .aligner import AlignerConfig
from .backbone import BackboneConfig
from .codec import CodecConfig
from .errors import ValidationError
from .flowhead import FlowConfig
from .harness.corpus import SynthConfig
from .harness.recipes import TrainBudget
from .pipeline import GenParams


@dataclasses.dataclass
class Defaults:
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    aligner: AlignerConfig = dataclasses.field(default_factory=AlignerConfig)
    codec: CodecConfig = dataclasses.field(default_factory=CodecConfig)
    backbone: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    flow: FlowConfig = dataclasses.field(default_factory=FlowConfig)
    gen: GenParams = dataclasses.field(default_factory=GenParams)
    budget: TrainBudget = dataclasses.field(default_factory=TrainBudget)


def _convert(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"config: cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return raw
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.split(","))
    raise ValidationError(f"config: unsupported field type {type(current).__name__}")


def apply_overrides(defaults: Defaults, lines: list[str]) -> Defaults:
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ValidationError(f"config line {lineno}: key must be section.field, got {key!r}")
        section, fname = key.split(".", 1)
        if not hasattr(defaults, section):
            raise ValidationError(f"config line {lineno}: unknown section {section!r}")
        target = getattr(defaults, section)
        if not hasattr(target, fname):
            raise ValidationError(f"config line {lineno}: unknown field {key!r}")
        setattr(target, fname, _convert(getattr(target, fname), raw))
    return defaults


def load_config(path: str | None) -> Defaults:
    defaults = Defaults()
    if path is None:
        return defaults
    text = Path(path).read_text()
    return apply_overrides(defaults, text.splitlines())
