"""Flat ``key = value`` run configuration.

Every key has a typed default; unknown keys and unparsable values are
rejected with :class:`ConfigError` before any work starts.
"""
from __future__ import annotations

import hashlib
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping

from .mask import parse_scale
from .model import ModelConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "input.size": 64,
    "data.dir": "data",
    "data.num_classes": 3,
    "data.train_count": 800,
    "data.val_count": 200,
    "data.twin": False,
    "data.seed": 2024,
    "backbone.base_width": 16,
    "neck.width": 32,
    "transformer.heads": 2,
    "transformer.points": 4,
    "transformer.enc_layers": 2,
    "transformer.dec_layers": 2,
    "transformer.num_queries": 16,
    "transformer.ffn_width": 64,
    "mfr.scale": Fraction(1, 4),
    "head.score_threshold": 0.5,
    "head.mfr_positions": True,
    "head.kernel_positions": True,
    "loss.lambda_cls": 1.0,
    "loss.lambda_mask": 3.0,
    "loss.noobj_weight": 0.1,
    "train.epochs": 30,
    "train.lr": 1e-3,
    "train.lr_drop_epochs": (22, 27),
    "train.lr_drop_factor": 0.1,
    "train.batch_size": 4,
    "train.weight_decay": 1e-4,
    "train.clip_norm": 0.1,
    "train.seed": 0,
    "train.eval_every": 1,
    "train.threads": 1,
    "ablate.seeds": (0, 1, 2),
    "ablate.epochs": 12,
    "ablate.lr_drop_epochs": (9, 11),
    "ablate.train_count": 800,
    "ablate.val_count": 200,
    "paths.out": "runs/default",
}


def _parse(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        raw_s = None
    else:
        raw_s = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = raw_s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            v = int(raw) if raw_s is None else int(raw_s)
            if isinstance(raw, float) and v != raw:
                raise ValueError(raw)
            return v
        if isinstance(default, float):
            return float(raw) if raw_s is None else float(raw_s)
        if isinstance(default, Fraction):
            return parse_scale(raw)
        if isinstance(default, tuple):
            if raw_s is None:
                return tuple(int(x) for x in raw)
            return tuple(int(x) for x in raw_s.replace(",", " ").split())
        return str(raw) if raw_s is None else raw_s
    except (ValueError, TypeError, AttributeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig(Mapping[str, Any]):
    """Immutable validated configuration."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _parse(k, v)
        self._values = merged
        self._validate()

    def _validate(self) -> None:
        v = self._values
        if v["input.size"] % 32 or v["input.size"] <= 0:
            raise ConfigError("input.size must be a positive multiple of 32")
        if v["neck.width"] % 4 or v["neck.width"] % v["transformer.heads"]:
            raise ConfigError("neck.width must be a multiple of 4 and of transformer.heads")
        for k in (
            "transformer.num_queries",
            "train.epochs",
            "train.batch_size",
            "data.num_classes",
            "data.train_count",
            "data.val_count",
            "ablate.epochs",
            "ablate.train_count",
            "ablate.val_count",
        ):
            if v[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        if not v["ablate.seeds"]:
            raise ConfigError("ablate.seeds must list at least one seed")
        if not 0 <= v["head.score_threshold"] <= 1:
            raise ConfigError("head.score_threshold must be in [0, 1]")

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **changes: Any) -> "RunConfig":
        """Keys use ``__`` for the dot, e.g. ``replace(train__epochs=3)``."""
        return self.updated({k.replace("__", "."): v for k, v in changes.items()})

    def updated(self, changes: Mapping[str, Any]) -> "RunConfig":
        return RunConfig({**self._values, **changes})

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self._values.items())

    def digest(self, keys: Iterable[str] | None = None) -> str:
        keys = sorted(keys if keys is not None else self._values)
        text = "".join(f"{k}={_format(self._values[k])}\n" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        v = self._values
        return ModelConfig(
            num_classes=v["data.num_classes"],
            base_width=v["backbone.base_width"],
            dim=v["neck.width"],
            heads=v["transformer.heads"],
            points=v["transformer.points"],
            enc_layers=v["transformer.enc_layers"],
            dec_layers=v["transformer.dec_layers"],
            num_queries=v["transformer.num_queries"],
            ffn_width=v["transformer.ffn_width"],
            mfr_scale=v["mfr.scale"],
            mfr_positions=v["head.mfr_positions"],
            kernel_positions=v["head.kernel_positions"],
        )

    def __repr__(self) -> str:
        return f"RunConfig({self.digest()})"


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    values.update(overrides or {})
    return RunConfig(values)
