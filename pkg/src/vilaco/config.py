"""Configuration dataclasses, JSON config files, and key=value overrides.

Override precedence is: built-in default < config file < explicit override.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

_UNSET = object()

IMAGE_SIZE = 256  # production input resolution; images are resized to this

DETERMINISTIC_ENV = "VILACO_DETERMINISTIC"


@dataclass
class EncoderConfig:
    patch_size: int = 8
    dim: int = 64
    backend: str = "stub"  # "stub" | "pretrained"
    seed: int = 0
    checkpoint: str = ""  # weights path, pretrained backend only

    def validate(self):
        if self.patch_size <= 0 or IMAGE_SIZE % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide {IMAGE_SIZE}"
            )
        if self.dim <= 0:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.backend not in ("stub", "pretrained"):
            raise ConfigError(f"unknown encoder backend {self.backend!r}")


@dataclass
class AdapterConfig:
    window: int = 8
    shift: int | None = None  # None -> window // 2
    heads: int = 4
    sigma_dist: float | None = None  # None -> grid side / 4
    gcn_out: int | None = None  # None -> feature dim (required for residual)

    def resolved_shift(self) -> int:
        return self.window // 2 if self.shift is None else self.shift

    def validate(self, grid_side: int | None = None, dim: int | None = None):
        if self.window <= 0:
            raise ConfigError("window must be positive")
        shift = self.resolved_shift()
        if not 0 <= shift < self.window:
            raise ConfigError(f"shift {shift} must satisfy 0 <= shift < window")
        if grid_side is not None and grid_side % self.window:
            raise ConfigError(
                f"window {self.window} does not divide grid side {grid_side}"
            )
        if self.sigma_dist is not None and self.sigma_dist <= 0:
            raise ConfigError("sigma_dist must be positive")
        if dim is not None:
            if dim % self.heads:
                raise ConfigError(f"dim {dim} not divisible by heads {self.heads}")
            if self.gcn_out is not None and self.gcn_out != dim:
                raise ConfigError("gcn_out must equal dim (residual connection)")


@dataclass
class PromptConfig:
    context_length: int = 8  # number of learnable context tokens, must be even

    def validate(self):
        if self.context_length < 0 or self.context_length % 2:
            raise ConfigError(
                f"context_length must be even and >= 0, got {self.context_length}"
            )


@dataclass
class ReasoningConfig:
    heads: int = 4
    ffn_mult: int = 4

    def validate(self, dim: int | None = None):
        if self.heads <= 0 or self.ffn_mult <= 0:
            raise ConfigError("heads and ffn_mult must be positive")
        if dim is not None and dim % self.heads:
            raise ConfigError(f"dim {dim} not divisible by heads {self.heads}")


@dataclass
class HeadConfig:
    k_ratio: float = 0.1
    decoder_channels: int = 16
    sg_theta_init: float = 0.5
    sg_temp_init: float = 0.1

    def validate(self):
        if not 0 < self.k_ratio <= 1:
            raise ConfigError(f"k_ratio must be in (0, 1], got {self.k_ratio}")
        if self.decoder_channels <= 0:
            raise ConfigError("decoder_channels must be positive")
        if self.sg_temp_init <= 1e-3:
            raise ConfigError("sg_temp_init must exceed 1e-3")


@dataclass
class CPCConfig:
    tau_fg: float = 0.7
    tau_bg: float = 0.3
    gamma: float = 0.1
    max_pairs: int = 256

    def validate(self):
        if not 0 <= self.tau_bg < self.tau_fg <= 1:
            raise ConfigError(
                f"need 0 <= tau_bg < tau_fg <= 1, got ({self.tau_bg}, {self.tau_fg})"
            )
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.max_pairs < 1:
            raise ConfigError("max_pairs must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 32
    epochs: int = 100
    warmup: int = 10  # epoch at which the consistency term starts ramping
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 10
    deterministic: bool = True  # serial data order; shuffle when False
    augment: bool = False
    use_coarse_loss: bool = True
    use_fine_loss: bool = True
    use_cpc_loss: bool = True

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not 0 <= self.warmup < self.epochs:
            raise ConfigError(
                f"need 0 <= warmup < epochs, got ({self.warmup}, {self.epochs})"
            )
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class GenSpec:
    count: int = 64
    fake_ratio: float = 0.5
    tamper_kinds: tuple = ("splice", "copy_move", "inpaint_blur")
    area_range: tuple = (0.05, 0.3)
    seed: int = 0

    KNOWN_KINDS = ("splice", "copy_move", "inpaint_blur")

    def validate(self):
        if self.count < 2:
            raise ConfigError(f"count must be >= 2, got {self.count}")
        if not 0 <= self.fake_ratio <= 1:
            raise ConfigError("fake_ratio must be in [0, 1]")
        lo, hi = self.area_range
        if not 0 < lo < hi < 1:
            raise ConfigError(f"area_range must satisfy 0 < lo < hi < 1, got {self.area_range}")
        for kind in self.tamper_kinds:
            if kind not in self.KNOWN_KINDS:
                raise ConfigError(f"unknown tamper kind {kind!r}")
        if not self.tamper_kinds:
            raise ConfigError("tamper_kinds must not be empty")


@dataclass
class Config:
    """Bundle of every section, mirroring the JSON config file layout."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    reasoning: ReasoningConfig = field(default_factory=ReasoningConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    cpc: CPCConfig = field(default_factory=CPCConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenSpec = field(default_factory=GenSpec)

    def validate(self):
        self.encoder.validate()
        self.adapter.validate(dim=self.encoder.dim)
        self.prompt.validate()
        self.reasoning.validate(dim=self.encoder.dim)
        self.head.validate()
        self.cpc.validate()
        self.train.validate()
        self.gen.validate()
        return self


_SECTIONS = {f.name: f.type for f in dataclasses.fields(Config)}


def _coerce(value: str, current):
    """Parse a string override against the type of the current value."""
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"cannot parse {value!r} as bool")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r} as int") from exc
    if isinstance(current, float):
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r} as float") from exc
    if isinstance(current, (tuple, list)):
        stripped = value.strip().lstrip("[(").rstrip(")]")
        parts = [p.strip() for p in stripped.split(",") if p.strip()]
        try:
            if current and isinstance(current[0], float):
                return tuple(float(p) for p in parts)
            if current and isinstance(current[0], int):
                return tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r} as a number list") from exc
        return tuple(parts)
    if current is None or isinstance(current, str):
        return value
    raise ConfigError(f"unsupported override target type {type(current)}")


def apply_override(cfg: Config, dotted_key: str, value=_UNSET):
    """Set ``section.field`` on cfg; unknown keys raise ConfigError.

    Accepts either ("section.field", value) or one "section.field=value"
    expression as produced by the CLI's --set flag.
    """
    if value is _UNSET:
        if "=" not in dotted_key:
            raise ConfigError(
                f"override {dotted_key!r} must look like section.field=value")
        dotted_key, value = (part.strip() for part in dotted_key.split("=", 1))
    parts = dotted_key.split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key must look like section.field, got {dotted_key!r}")
    section_name, field_name = parts
    if section_name not in _SECTIONS:
        raise ConfigError(f"unknown config section {section_name!r}")
    section = getattr(cfg, section_name)
    if not hasattr(section, field_name):
        raise ConfigError(f"unknown config key {dotted_key!r}")
    current = getattr(section, field_name)
    if isinstance(value, str):
        value = _coerce(value, current)
    setattr(section, field_name, value)


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> Config:
    cfg = Config()
    for section_name, section_data in data.items():
        if section_name not in _SECTIONS:
            raise ConfigError(f"unknown config section {section_name!r}")
        if not isinstance(section_data, dict):
            raise ConfigError(f"section {section_name!r} must be an object")
        section = getattr(cfg, section_name)
        for key, value in section_data.items():
            if not hasattr(section, key):
                raise ConfigError(f"unknown config key {section_name}.{key}")
            current = getattr(section, key)
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(section, key, value)
    return cfg


def load_config(path: str | Path | None = None, overrides=()) -> Config:
    """Build a Config from defaults, an optional JSON file, then overrides."""
    if path is None:
        cfg = Config()
    else:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = config_from_dict(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        key, value = item.split("=", 1)
        apply_override(cfg, key.strip(), value.strip())
    if os.environ.get(DETERMINISTIC_ENV) == "1":
        cfg.train.deterministic = True
    return cfg


def save_config(cfg: Config, path: str | Path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
