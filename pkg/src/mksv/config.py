"""Settings: defaults < key=value config file < MKSV_* environment < flags."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from mksv.errors import ConfigError

ENV_PREFIX = "MKSV_"


@dataclass(frozen=True)
class Settings:
    # control plane
    host: str = "127.0.0.1"
    port: int = 7070
    default_mode: str = "shared"
    backend: str = "host"
    keep_alive_s: float = 60.0
    namespace_pool: int = 8
    namespace_low_water: int = 2
    template_pool: int = 2
    template_low_water: int = 1
    pool_refill: bool = True
    worker_cap: int = 256
    strict_page_mode: bool = False
    memory_mib: int = 16
    invoke_timeout_s: float = 60.0
    bulk_timeout_s: float = 5.0
    scratch_root: str = ""
    # replay
    max_inflight: int = 64
    slo_ms: float = math.inf
    slo_window_s: float = 5.0
    memory_budget_mib: float = math.inf
    service_time_ms: float = 100.0
    downsample: int = 1
    duration_cap_s: float = math.inf
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, kind: type, raw) -> object:
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _types() -> dict[str, type]:
    return {f.name: type(f.default) for f in dataclasses.fields(Settings)}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#``/``;`` comments and ``[section]`` lines are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith(";") or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        out[key.strip()] = value.strip().strip('"').strip("'")
    return out


def load_settings(path: str | Path | None = None, *, env: Mapping[str, str] | None = None,
                  overrides: Mapping[str, object] | None = None) -> Settings:
    types = _types()
    merged: dict[str, object] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        for key, value in parse_kv(text, str(path)).items():
            if key not in types:
                raise ConfigError(f"{key}: unknown config key")
            merged[key] = _coerce(key, types[key], value)
    env = os.environ if env is None else env
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in types:
                merged[key] = _coerce(name, types[key], value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in types:
            raise ConfigError(f"{key}: unknown config key")
        merged[key] = _coerce(key, types[key], value)
    settings = Settings(**merged)
    validate(settings)
    return settings


def validate(s: Settings) -> None:
    if s.default_mode not in ("shared", "one-to-one", "standalone"):
        raise ConfigError(f"default_mode: unknown mode {s.default_mode!r}")
    if s.backend not in ("host", "echo"):
        raise ConfigError(f"backend: unknown backend {s.backend!r}")
    for key in ("namespace_pool", "template_pool", "max_inflight", "downsample", "worker_cap",
                "memory_mib"):
        if getattr(s, key) < (1 if key in ("max_inflight", "downsample", "worker_cap",
                                           "memory_mib") else 0):
            raise ConfigError(f"{key}: value {getattr(s, key)} is out of range")
    if not 0 <= s.namespace_low_water <= s.namespace_pool:
        raise ConfigError("namespace_low_water: must lie between 0 and namespace_pool")
    if not 0 <= s.template_low_water <= s.template_pool:
        raise ConfigError("template_low_water: must lie between 0 and template_pool")
    if not 0 <= s.port <= 65535:
        raise ConfigError(f"port: {s.port} is not a TCP port")
    for key in ("keep_alive_s", "slo_window_s", "service_time_ms", "invoke_timeout_s",
                "bulk_timeout_s"):
        if not getattr(s, key) > 0:
            raise ConfigError(f"{key}: must be positive")
