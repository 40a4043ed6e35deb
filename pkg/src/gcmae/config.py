"""Run configuration and the flat `key = value` config-file format.

Files are plain text: one `key = value` per line, `#` comments, nested
fields via dotted keys (`encoder.depth = 4`). Every key must name a known
field; typos fail loudly. CLI flag overrides are applied on top of the file
and the final effective config is what gets hashed and echoed to run.json.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datasets import DatasetSpec
from .decoder import DecoderConfig
from .encoder import EncoderConfig

TABLE_RATIOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.9)


@dataclass
class ProbeConfig:
    lr: float = 0.05
    weight_decay: float = 0.0
    max_epochs: int = 200
    patience: int = 5  # epochs of no val-loss improvement before stopping
    min_delta: float = 1e-5
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class FineTuneConfig:
    epochs: int = 10
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch_size: int = 64
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 80
    batch_size: int = 64
    mask_ratio: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1
    temperature: float = 0.07
    bank_mixing: float = 0.5
    num_negatives: int = 8192
    contrastive: bool = True
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 0
    schedule: str = "constant"  # constant | cosine
    loss_on: str = "masked"  # masked | all
    target_norm: str = "dataset"  # dataset | per_patch
    dtype: str = "float32"
    checkpoint_every: int = 1  # epochs between rolling checkpoints
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.loss_on not in ("masked", "all"):
            raise ValueError(f"loss_on must be 'masked' or 'all', got {self.loss_on!r}")
        if self.target_norm not in ("dataset", "per_patch"):
            raise ValueError(f"target_norm must be 'dataset' or 'per_patch', got {self.target_norm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "data": DatasetSpec,
    "probe": ProbeConfig,
    "finetune": FineTuneConfig,
}


def parse_value(text: str):
    """Coerce a raw config value: bool, int, float, list (comma), or string."""
    text = text.strip()
    if "," in text:
        return tuple(parse_value(part) for part in text.split(","))
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines into a flat {dotted key: value} dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus flat dotted overrides."""
    flat = {}
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text()))
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    return config_from_flat(flat)


def config_from_flat(flat: dict) -> RunConfig:
    top_fields = {f.name for f in fields(RunConfig)}
    kwargs: dict = {}
    nested: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, value in flat.items():
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"unknown config section {section!r} in key {key!r}")
            section_fields = {f.name for f in fields(_SECTIONS[section])}
            if sub not in section_fields:
                raise ValueError(f"unknown config key {key!r}")
            nested[section][sub] = value
        else:
            if key not in top_fields or key in _SECTIONS:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = value
    for section, cls in _SECTIONS.items():
        kwargs[section] = cls(**nested[section])
    return RunConfig(**kwargs)


def config_hash(cfg: RunConfig) -> str:
    """Stable digest of the effective configuration."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
