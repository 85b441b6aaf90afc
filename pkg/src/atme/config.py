"""Flat dotted-key run configuration."""

from __future__ import annotations

import difflib
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

import yaml

from .bridge import WTransformConfig
from .data import AugmentPolicy
from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig
from .objectives import LossConfig


class ConfigError(ValueError):
    pass


FULL_DEFAULTS: dict[str, Any] = {
    "data.root": "",
    "data.split": "train",
    "data.direction": "AtoB",
    "data.batch_size": 48,
    "data.crop_size": 256,
    "data.jitter_resize": 286,
    "data.hflip_prob": 0.5,
    "data.augment": True,
    "data.seed": 0,
    "gen.embed_dim": 64,
    "gen.resolutions": [1, 2, 4, 8],
    "gen.attention_levels": [3, 4],
    "gen.time_embed_dim": 128,
    "disc.base_channels": 64,
    "disc.n_layers": 3,
    "bridge.hidden_channels": 16,
    "bridge.output_scale": 0.01,
    "bridge.inference_sigma": 0.001,
    "bridge.cold_start": "max-entropy",
    "loss.lambda_l1": 100.0,
    "loss.adversarial_mode": "nonsaturating",
    "loss.eps": 1e-7,
    "train.epochs_const": 100,
    "train.epochs_decay": 100,
    "train.lr0": 2e-4,
    "train.adam_beta1": 0.5,
    "train.adam_beta2": 0.999,
    "train.seed": 0,
    "train.checkpoint_every": 10,
    "monitor.smooth_window": 5,
    "monitor.eval_size": 64,
    "monitor.probe_size": 16,
    "monitor.dw_window": 10,
}

DESK_OVERRIDES: dict[str, Any] = {
    "data.batch_size": 8,
    "data.crop_size": 64,
    "data.jitter_resize": 72,
    "gen.embed_dim": 16,
    "gen.resolutions": [1, 2],
    "gen.attention_levels": [],
    "gen.time_embed_dim": 32,
    "disc.base_channels": 32,
    "bridge.hidden_channels": 8,
    "train.epochs_const": 40,
    "train.epochs_decay": 40,
    "train.checkpoint_every": 10,
}

PRESETS = {"full": {}, "desk": DESK_OVERRIDES}
VALID_KEYS = tuple(FULL_DEFAULTS)


def preset(name: str = "full") -> dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = dict(FULL_DEFAULTS)
    cfg.update(PRESETS[name])
    return cfg


def _check_keys(keys: Iterable[str]) -> None:
    for key in keys:
        if key in FULL_DEFAULTS or key == "preset":
            continue
        close = difflib.get_close_matches(key, VALID_KEYS, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise ConfigError(f"unknown config key {key!r}{hint}\nvalid keys: {', '.join(VALID_KEYS)}")


def _coerce(key: str, value: Any) -> Any:
    default = FULL_DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        value = yaml.safe_load(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return [int(v) for v in value]
    return str(value)


def resolve(values: Optional[Mapping[str, Any]] = None, overrides: Iterable[str] = ()) -> dict[str, Any]:
    """Merge a flat document and ``key=value`` overrides onto their preset."""
    values = dict(values or {})
    base = preset(str(values.pop("preset", "full")))
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        parsed[k.strip()] = v.strip()
    _check_keys(values)
    _check_keys(parsed)
    for k, v in {**values, **parsed}.items():
        base[k] = _coerce(k, v)
    validate(base)
    return base


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a flat mapping of dotted keys")
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested sections {nested} not allowed; use dotted keys")
    return resolve(doc, overrides)


def validate(cfg: Mapping[str, Any]) -> None:
    try:
        augment_policy(cfg)
        generator_config(cfg)
        discriminator_config(cfg)
        loss_config(cfg)
        WTransformConfig(cfg["bridge.hidden_channels"], cfg["bridge.output_scale"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["data.direction"] not in ("AtoB", "BtoA"):
        raise ConfigError(f"data.direction must be AtoB or BtoA, got {cfg['data.direction']!r}")
    if cfg["data.crop_size"] % 2 ** len(cfg["gen.resolutions"]):
        raise ConfigError(
            f"data.crop_size {cfg['data.crop_size']} not divisible by 2^{len(cfg['gen.resolutions'])}"
        )
    if cfg["bridge.cold_start"] != "max-entropy":
        raise ConfigError("bridge.cold_start is fixed to 'max-entropy'")
    for key in ("data.batch_size", "train.epochs_const", "train.checkpoint_every", "monitor.smooth_window",
                "monitor.eval_size", "monitor.probe_size", "monitor.dw_window"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be positive, got {cfg[key]}")
    if cfg["train.epochs_decay"] < 0:
        raise ConfigError("train.epochs_decay must be >= 0")
    if cfg["train.lr0"] <= 0:
        raise ConfigError("train.lr0 must be > 0")
    if cfg["bridge.inference_sigma"] <= 0:
        raise ConfigError("bridge.inference_sigma must be > 0")


def augment_policy(cfg: Mapping[str, Any]) -> AugmentPolicy:
    return AugmentPolicy(cfg["data.jitter_resize"], cfg["data.crop_size"], cfg["data.hflip_prob"],
                         cfg["data.augment"])


def generator_config(cfg: Mapping[str, Any]) -> GeneratorConfig:
    return GeneratorConfig(embed_dim=cfg["gen.embed_dim"], resolutions=cfg["gen.resolutions"],
                           attention_levels=cfg["gen.attention_levels"],
                           time_embed_dim=cfg["gen.time_embed_dim"])


def discriminator_config(cfg: Mapping[str, Any]) -> DiscriminatorConfig:
    return DiscriminatorConfig(cfg["disc.base_channels"], cfg["disc.n_layers"], 6)


def loss_config(cfg: Mapping[str, Any]) -> LossConfig:
    return LossConfig(cfg["loss.lambda_l1"], cfg["loss.adversarial_mode"], cfg["loss.eps"])


def config_hash(cfg: Mapping[str, Any]) -> str:
    blob = json.dumps(dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config(cfg: Mapping[str, Any], path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(dict(cfg), sort_keys=True))
    return path
