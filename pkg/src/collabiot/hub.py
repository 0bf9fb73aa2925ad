"""Hub configuration: YAML file, then environment, then command-line flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .rpc import parse_address
from .tokens import DEFAULT_CLOCK_SKEW

DEFAULT_LISTEN = "127.0.0.1:7400"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HubConfig:
    listen: str = DEFAULT_LISTEN
    store: str = "collabiot-state"
    key_file: str | None = None
    clock_skew: float = DEFAULT_CLOCK_SKEW
    max_repair_rounds: int = 3
    tls: bool = False
    llm: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            parse_address(self.listen)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.clock_skew < 0:
            raise ConfigError("clock_skew must be non-negative")
        if self.max_repair_rounds < 1:
            raise ConfigError("max_repair_rounds must be >= 1")

    @property
    def key_path(self) -> Path:
        return Path(self.key_file) if self.key_file else Path(self.store) / "issuer.key"


_ENV = {
    "COLLABIOT_LISTEN": "listen",
    "COLLABIOT_STORE": "store",
    "COLLABIOT_KEY_FILE": "key_file",
}


def load_config(path: str | os.PathLike | None = None, env: Mapping[str, str] | None = None,
                **overrides: Any) -> HubConfig:
    """File values, then environment, then explicit overrides (None is ignored)."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a mapping")
    env = os.environ if env is None else env
    for var, key in _ENV.items():
        if env.get(var):
            raw[key] = env[var]
    raw.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(raw) - set(HubConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return HubConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def with_store(config: HubConfig, store: str | None) -> HubConfig:
    return config if store is None else replace(config, store=store)
