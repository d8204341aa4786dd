"""Application configuration: flags > environment > config file > defaults."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .registry import ExpertRegistry, default_registry, registry_from_config

ENV_PREFIX = "UNITASK_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AppConfig:
    state_dir: str = ".unitask-state"
    listen: str = "127.0.0.1:8751"
    log_level: str = "info"
    seed: int = 0
    experts: "tuple[dict, ...] | None" = None  # None means the stock mock registry

    def to_json_dict(self) -> dict:
        return {
            "state_dir": self.state_dir,
            "listen": self.listen,
            "log_level": self.log_level,
            "seed": self.seed,
            "experts": [dict(e) for e in self.experts] if self.experts is not None else None,
        }

    def build_registry(self) -> ExpertRegistry:
        if self.experts is None:
            return default_registry(seed=self.seed)
        return registry_from_config(list(self.experts), default_seed=self.seed)


_FILE_KEYS = {"state_dir", "listen", "log_level", "seed", "experts"}
_ENV_KEYS = {"state_dir": "STATE_DIR", "listen": "LISTEN", "log_level": "LOG_LEVEL", "seed": "SEED"}


def load_config(
    path: "str | Path | None" = None,
    env: "Mapping[str, str] | None" = None,
    overrides: "Mapping[str, object] | None" = None,
) -> AppConfig:
    values: dict = {}

    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        unknown = set(doc) - _FILE_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(doc)

    env_map = os.environ if env is None else env
    for field_name, suffix in _ENV_KEYS.items():
        raw = env_map.get(ENV_PREFIX + suffix)
        if raw is not None:
            values[field_name] = raw

    if overrides:
        for key, value in overrides.items():
            if key not in _FILE_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                values[key] = value

    if "experts" in values and values["experts"] is not None:
        experts = values["experts"]
        if not isinstance(experts, (list, tuple)):
            raise ConfigError("experts must be a list")
        values["experts"] = tuple(dict(e) for e in experts)
    try:
        if "seed" in values:
            values["seed"] = int(values["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer: {values['seed']!r}") from exc

    return AppConfig(**{k: v for k, v in values.items() if v is not None or k == "experts"})
