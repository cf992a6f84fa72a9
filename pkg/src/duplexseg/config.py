"""Flat dotted-key configuration with typed defaults.

Every key has a default and unknown keys are rejected, so a fully-resolved
config is always a complete snapshot; it is persisted inside every checkpoint.
Config files are plain text, one `key = value` per line, `#` comments allowed.
"""

from pathlib import Path
from typing import Any, Dict, List

from .errors import ConfigurationError


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> List[int]:
    return [int(tok) for tok in str(text).replace(",", " ").split()]


# key -> (default value, parser from string)
DEFAULTS: Dict[str, tuple] = {
    "seed": (0, int),
    "model.modality": ("rgb+normal", str),  # rgb+normal | rgb
    "backbone.stem_channels": (16, int),
    "backbone.channels": ([16, 32, 64, 128], _parse_int_list),
    "backbone.blocks": ([1, 1, 1, 1], _parse_int_list),
    "fusion.mode": ("hffm+ffrm", str),
    "pixel_decoder.C": (64, int),
    "pixel_decoder.layers": (3, int),
    "pixel_decoder.heads": (4, int),
    "pixel_decoder.points": (4, int),
    "decoder.num_queries": (20, int),
    "decoder.layers": (6, int),
    "decoder.dim": (64, int),
    "loss.lambda_mask": (1.0, float),
    "loss.lambda_ce": (5.0, float),
    "loss.lambda_dice": (5.0, float),
    "loss.lambda_cls": (2.0, float),
    "loss.no_object_weight": (0.1, float),
    "optim.lr": (1e-4, float),
    "optim.weight_decay": (5e-2, float),
    "optim.backbone_lr_mult": (0.1, float),
    "optim.poly_power": (0.9, float),
    "optim.clip_norm": (1.0, float),
    "train.steps": (500, int),
    "train.batch_size": (2, int),
    "train.log_every": (10, int),
    "train.val_every": (0, int),  # 0: no periodic validation
    "data.root": ("data", str),
    "data.ignore_id": (255, int),
    "data.input_mean": (0.5, float),
    "data.input_std": (0.5, float),
    "eval.mask_threshold": (0.5, float),
}


class Config:
    """Immutable-by-convention mapping of dotted keys to typed values."""

    def __init__(self, overrides: Dict[str, Any] = None):
        self._values = {k: v for k, (v, _) in DEFAULTS.items()}
        for key, val in (overrides or {}).items():
            self.set(key, val)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        default, parser = DEFAULTS[key]
        if isinstance(value, str) and not isinstance(default, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigurationError(f"cannot parse {key}={value!r}: {exc}") from exc
        if isinstance(default, float) and isinstance(value, int):
            value = float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"config key {key!r} expects a list, got {type(value).__name__}")
            value = [int(v) for v in value]
        elif not isinstance(value, type(default)):
            raise ConfigurationError(
                f"config key {key!r} expects {type(default).__name__}, got {type(value).__name__}"
            )
        self._values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        return self._values[key]

    def to_dict(self) -> Dict[str, Any]:
        return dict(self._values)

    def copy_with(self, **dotted) -> "Config":
        """New config with keys given as e.g. copy_with(**{"fusion.mode": "concat"})."""
        cfg = Config(self.to_dict())
        for key, val in dotted.items():
            cfg.set(key, val)
        return cfg

    def validate(self) -> None:
        if self["model.modality"] not in ("rgb+normal", "rgb"):
            raise ConfigurationError(f"model.modality must be rgb+normal or rgb, got {self['model.modality']!r}")
        if self["decoder.dim"] != self["pixel_decoder.C"]:
            raise ConfigurationError(
                f"decoder.dim ({self['decoder.dim']}) must equal pixel_decoder.C ({self['pixel_decoder.C']})"
            )
        if len(self["backbone.channels"]) != 4 or len(self["backbone.blocks"]) != 4:
            raise ConfigurationError("backbone.channels and backbone.blocks must list 4 stages")
        if self["pixel_decoder.C"] % self["pixel_decoder.heads"]:
            raise ConfigurationError("pixel_decoder.C must be divisible by pixel_decoder.heads")


def parse_config_text(text: str, base: Config = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        cfg.set(key, value)
    return cfg


def load_config(path, overrides: Dict[str, str] = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), base=cfg)
    for key, val in (overrides or {}).items():
        cfg.set(key, val)
    cfg.validate()
    return cfg


def format_config(cfg: Config) -> str:
    lines = []
    for key in sorted(cfg.to_dict()):
        val = cfg[key]
        if isinstance(val, list):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
