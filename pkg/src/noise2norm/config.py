"""Run configuration: every tunable grouped by section, addressed by dotted keys.

Sections and their keys mirror the config dataclasses::

    model.*  -> ModelConfig      noise.*  -> NoiseConfig (``noise.lambda`` is ``lam``)
    ssim.*   -> SsimParams       loss.*   -> LossConfig
    train.*  -> TrainConfig      data.root, data.category, output.dir

Unknown keys and invalid values raise :class:`ConfigError` before anything
else happens.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import ConfigError, InvalidArgumentError
from .model import ModelConfig
from .msssim import LossConfig, SsimParams
from .noise import NoiseConfig
from .training import CHECKPOINT_VERSION, TrainConfig

SECTIONS = {"model": ModelConfig, "noise": NoiseConfig, "ssim": SsimParams, "loss": LossConfig, "train": TrainConfig}
ALIASES = {("noise", "lambda"): "lam"}
EXTRA_KEYS = {"data.root": "data", "data.category": "synth", "output.dir": "runs/default"}


def _field_name(section: str, key: str) -> str:
    return ALIASES.get((section, key), key)


def _public_name(section: str, name: str) -> str:
    for (s, k), v in ALIASES.items():
        if s == section and v == name:
            return k
    return name


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ssim: SsimParams = field(default_factory=SsimParams)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: str = "data"
    data_category: str = "synth"
    output_dir: str = "runs/default"

    # -------------------------------------------------------- construction
    @classmethod
    def from_flat(cls, flat: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        """Build from dotted ``section.key`` entries layered over ``base``."""
        base = base or cls()
        per_section: dict[str, dict] = {s: {} for s in SECTIONS}
        extras = {"data.root": base.data_root, "data.category": base.data_category, "output.dir": base.output_dir}
        for key, value in flat.items():
            if key in EXTRA_KEYS:
                extras[key] = str(value)
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown configuration key {key!r}")
            fname = _field_name(section, name)
            valid = {f.name for f in dataclasses.fields(SECTIONS[section])}
            if fname not in valid:
                raise ConfigError(f"unknown configuration key {key!r}")
            per_section[section][fname] = _coerce(key, SECTIONS[section], fname, value)
        built = {}
        for section, cls_ in SECTIONS.items():
            current = dataclasses.asdict(getattr(base, section))
            current.update(per_section[section])
            try:
                built[section] = cls_(**current)
            except (InvalidArgumentError, TypeError, ValueError) as e:
                raise ConfigError(f"invalid value in section {section!r}: {e}") from e
        return cls(**built, data_root=extras["data.root"], data_category=extras["data.category"],
                   output_dir=extras["output.dir"])

    @classmethod
    def from_dict(cls, nested: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        """Accept ``{"model": {...}, ...}`` nesting, dotted keys, or a mix."""
        return cls.from_flat(flatten(nested), base)

    @classmethod
    def from_json_file(cls, path: str, base: "RunConfig | None" = None) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data, base)

    def with_overrides(self, **dotted: Any) -> "RunConfig":
        return RunConfig.from_flat(dotted, self)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.with_overrides(**{"train.split_seed": seed, "train.init_seed": seed, "train.noise_seed": seed})

    # -------------------------------------------------------------- export
    def to_dict(self) -> dict:
        out = {}
        for section in SECTIONS:
            d = dataclasses.asdict(getattr(self, section))
            out[section] = {_public_name(section, k): list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        out["data"] = {"root": self.data_root, "category": self.data_category}
        out["output"] = {"dir": self.output_dir}
        return out

    def fingerprint(self) -> str:
        """Hash of every setting that affects results; file locations are left out."""
        d = self.to_dict()
        d["data"] = {"category": self.data_category}
        del d["output"]
        return config_fingerprint(d)


def _coerce(key: str, cls_, fname: str, value: Any) -> Any:
    default = next(f for f in dataclasses.fields(cls_) if f.name == fname).default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("on", "true", "off", "false"):
            return value.lower() in ("on", "true")
        raise ConfigError(f"{key} expects a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if default is None and value is None:
            return None
        if fname in ("norm_mean", "norm_std") and isinstance(value, (list, tuple)):
            return tuple(float(v) for v in value)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} expects a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    return value


def flatten(nested: Mapping[str, Any], prefix: str = "") -> dict:
    flat = {}
    for k, v in nested.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            flat.update(flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def config_fingerprint(configs: Mapping[str, Any], version: int = CHECKPOINT_VERSION) -> str:
    """First 16 hex digits of sha256 over canonical JSON of ``configs`` plus the checkpoint version."""
    payload = json.dumps({"configs": configs, "checkpoint_version": version}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def model_fingerprint(model: ModelConfig) -> str:
    return config_fingerprint({"model": dataclasses.asdict(model)})


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value``; the value is parsed as JSON when possible, else kept as a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def full_scale_config() -> RunConfig:
    """Settings matching the published training protocol (256 px, 500 epochs)."""
    return RunConfig().with_overrides(**{
        "model.base_channels": 64, "train.image_size": 256, "train.max_epochs": 500, "train.lr0": 1e-4,
        "train.batch_size": 4, "loss.smooth_sigma": 16.0,
    })
