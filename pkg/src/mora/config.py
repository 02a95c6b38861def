"""Run configuration: flat dotted keys, two built-in presets, strict parsing.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Unknown keys are rejected so typos fail loudly. The ``desk`` preset is the
working default; the ``paper`` preset records the reference full-scale
hyperparameters for documentation (its query count is deliberately kept as
published and is not consistent with its own target set, so instantiating a
generator from it raises a startup error; see README).
"""

from __future__ import annotations

import os
from typing import Any

__all__ = ["ConfigurationError", "RunConfig", "DESK_DEFAULTS", "PAPER_OVERRIDES"]


class ConfigurationError(ValueError):
    """Invalid configuration: unknown key, bad value, or inconsistent setup."""


# defaults double as the schema: a key's type is the type of its default
DESK_DEFAULTS: dict[str, Any] = {
    "preset": "desk",
    "seed": 0,
    "backbone.layers": 4,
    "backbone.dim": 64,
    "backbone.heads": 4,
    "backbone.ffn_dim": 256,
    "backbone.context": 256,
    "backbone.pretrain_steps": 0,
    "encoder.layers": 3,
    "encoder.dim": 32,
    "encoder.trainable": False,
    "mawgen.blocks": 2,
    "mawgen.queries": 5,
    "mawgen.rank": 4,
    "mawgen.alpha": 4.0,
    "mawgen.dim": 32,
    "mawgen.targets": "qkvof",
    "mawgen.assignment": "shared_across_layers",
    "training.lr": 3e-4,
    "training.batch": 8,
    "training.steps": 2000,
    "training.epochs": 0,
    "training.warmup_frac": 0.03,
    "training.weight_decay": 0.0,
    "training.beta1": 0.9,
    "training.beta2": 0.999,
    "training.eps": 1e-8,
    "training.checkpoint_every": 0,
    "eval.max_new": 32,
    "eval.fp_bits": 256,
    "eval.fp_radius": 2,
}

PAPER_OVERRIDES: dict[str, Any] = {
    "preset": "paper",
    "mawgen.blocks": 8,
    "mawgen.queries": 4,
    "mawgen.rank": 64,
    "mawgen.alpha": 64.0,
    "training.lr": 2e-5,
}

_PRESETS = {"desk": {}, "paper": PAPER_OVERRIDES}


def _parse_value(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(
            f"bad value {raw!r} for key {key!r} "
            f"(expected {type(default).__name__})"
        ) from None


class RunConfig:
    """Immutable flat key/value configuration."""

    def __init__(self, values: dict[str, Any]):
        self._values = dict(values)

    def __getitem__(self, key: str) -> Any:
        try:
            return self._values[key]
        except KeyError:
            raise ConfigurationError(f"unknown config key {key!r}") from None

    @property
    def seed(self) -> int:
        return self._values["seed"]

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        merged = dict(self._values)
        for key, value in overrides.items():
            if key not in DESK_DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            merged[key] = value
        return RunConfig(merged)

    @classmethod
    def defaults(cls, preset: str = "desk") -> "RunConfig":
        if preset not in _PRESETS:
            raise ConfigurationError(
                f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}"
            )
        values = dict(DESK_DEFAULTS)
        values.update(_PRESETS[preset])
        return cls(values)

    @classmethod
    def from_file(cls, path: str, preset: str | None = None) -> "RunConfig":
        entries: dict[str, Any] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                body = line.split("#", 1)[0].strip()
                if not body:
                    continue
                if "=" not in body:
                    raise ConfigurationError(
                        f"{path}:{lineno}: expected 'key = value', got {body!r}"
                    )
                key, raw = body.split("=", 1)
                key = key.strip()
                if key not in DESK_DEFAULTS:
                    raise ConfigurationError(
                        f"{path}:{lineno}: unknown config key {key!r}"
                    )
                entries[key] = _parse_value(key, raw, DESK_DEFAULTS[key])
        base = preset or entries.get("preset", "desk")
        return cls.defaults(base).with_overrides(entries)

    def with_env_seed(self) -> "RunConfig":
        """MORA_SEED in the environment overrides the configured seed."""
        raw = os.environ.get("MORA_SEED")
        if raw is None:
            return self
        try:
            return self.with_overrides({"seed": int(raw)})
        except ValueError:
            raise ConfigurationError(f"MORA_SEED must be an integer, got {raw!r}") from None

    def to_text(self) -> str:
        lines = [f"{k} = {self._values[k]}" for k in sorted(self._values)]
        return "\n".join(lines) + "\n"
