"""Run configuration: a flat key-value file with include support.

Lines are ``key = value``; ``#`` starts a comment; ``include <path>`` pulls in
another file (relative to the including file) at that point, with later
assignments winning. Command-line flags override file values. A canonical
hash of the resolved mapping is stamped into every output manifest so runs
are attributable; ``output_dir`` is excluded from the hash because the output
location does not affect results.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Mapping

from .backend import default_template_dir
from .corpus import DEFAULT_SECTORS, DEFAULT_THRESHOLDS

_PATH_KEYS = ("corpus", "prices", "metrics", "script", "templates")
_HASH_EXCLUDED_KEYS = {"output_dir"}


class ConfigError(Exception):
    """Malformed or incomplete run configuration."""


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat key-value config file, following ``include`` directives."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            include_path = Path(line[len("include "):].strip())
            if not include_path.is_absolute():
                include_path = path.parent / include_path
            values.update(read_config_file(include_path))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _parse_floats(value: str, expected: int, key: str) -> tuple[float, ...]:
    parts = [p for p in value.split(",") if p.strip()]
    if len(parts) != expected:
        raise ConfigError(f"{key}: expected {expected} comma-separated values, got {value!r}")
    return tuple(float(p) for p in parts)


def _parse_int_pair(value: str, key: str) -> tuple[int, int]:
    parts = [p for p in value.split(",") if p.strip()]
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'lo,hi', got {value!r}")
    lo, hi = int(parts[0]), int(parts[1])
    if lo > hi:
        raise ConfigError(f"{key}: lower bound exceeds upper: {value!r}")
    return lo, hi


@dataclass
class RunConfig:
    """Resolved settings shared by every pipeline stage."""

    seed: int
    corpus: Path | None = None
    prices: Path | None = None
    metrics: Path | None = None
    script: Path | None = None
    templates: Path = field(default_factory=default_template_dir)
    output_dir: Path | None = None
    backend: str = "scripted"

    fact_range: tuple[int, int] = (6, 10)
    max_reflections: int = 4
    retry_limit: int = 2
    history_char_budget: int = 20_000
    comparison_pairs: str = "last"  # or "all"
    concurrency: int = 1

    thresholds: tuple[float, float, float, float] = DEFAULT_THRESHOLDS
    horizon_days: int = 30
    per_sector: int = 100
    test_after: date = date(2024, 1, 1)
    sectors: tuple[str, ...] = DEFAULT_SECTORS
    metric_tau: float = 0.02
    lookback: int = 4

    sft_epochs: int = 3
    sft_lr: float = 1e-5
    rm_epochs: int = 3
    rm_lr: float = 1e-4
    rl_epochs: int = 2
    rl_lr: float = 1e-5
    beta: float = 0.2
    penalty: str = "ratio"  # or "log"
    warmup_ratio: float = 0.1
    # Momentum-style settings are carried for provenance; the trainers use
    # plain full-batch descent.
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    remote_endpoint: str = ""
    remote_model: str = ""
    remote_api_key_env: str = "LLM_API_KEY"
    remote_timeout: float = 60.0
    remote_max_attempts: int = 3
    remote_max_in_flight: int = 4
    temperature: float = 0.0

    raw: dict[str, str] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        """Stable digest of the resolved key-value mapping."""
        lines = [
            f"{key}={self.raw[key]}"
            for key in sorted(self.raw)
            if key not in _HASH_EXCLUDED_KEYS
        ]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def build_run_config(
    values: Mapping[str, str],
    base_dir: Path,
    overrides: Mapping[str, str] | None = None,
) -> RunConfig:
    """Turn a raw mapping (file values plus flag overrides) into a RunConfig.

    Relative paths resolve against ``base_dir`` (the config file's directory).
    The seed is mandatory; every referenced path must exist at load time.
    """
    merged = dict(values)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    if "seed" not in merged:
        raise ConfigError("seed is mandatory (set it in the config file or pass --seed)")

    config = RunConfig(seed=int(merged["seed"]), raw=merged)

    def resolve(key: str) -> Path | None:
        if key not in merged:
            return None
        p = Path(merged[key])
        return p if p.is_absolute() else base_dir / p

    for key in _PATH_KEYS:
        value = resolve(key)
        if value is not None:
            setattr(config, key, value)
    out = resolve("output_dir")
    if out is not None:
        config.output_dir = out

    simple_int = (
        "max_reflections", "retry_limit", "history_char_budget", "concurrency",
        "horizon_days", "per_sector", "lookback", "sft_epochs", "rm_epochs",
        "rl_epochs", "remote_max_attempts", "remote_max_in_flight",
    )
    simple_float = (
        "metric_tau", "sft_lr", "rm_lr", "rl_lr", "beta", "warmup_ratio",
        "adam_beta1", "adam_beta2", "adam_epsilon", "remote_timeout", "temperature",
    )
    simple_str = (
        "backend", "comparison_pairs", "penalty", "remote_endpoint",
        "remote_model", "remote_api_key_env",
    )
    for key in simple_int:
        if key in merged:
            setattr(config, key, int(merged[key]))
    for key in simple_float:
        if key in merged:
            setattr(config, key, float(merged[key]))
    for key in simple_str:
        if key in merged:
            setattr(config, key, merged[key])
    if "fact_range" in merged:
        config.fact_range = _parse_int_pair(merged["fact_range"], "fact_range")
    if "thresholds" in merged:
        config.thresholds = _parse_floats(merged["thresholds"], 4, "thresholds")
    if "test_after" in merged:
        config.test_after = date.fromisoformat(merged["test_after"])
    if "sectors" in merged:
        config.sectors = tuple(s.strip() for s in merged["sectors"].split(",") if s.strip())

    if config.backend not in ("scripted", "remote"):
        raise ConfigError(f"backend must be 'scripted' or 'remote', got {config.backend!r}")
    if config.comparison_pairs not in ("last", "all"):
        raise ConfigError(f"comparison_pairs must be 'last' or 'all', got {config.comparison_pairs!r}")
    if config.penalty not in ("ratio", "log"):
        raise ConfigError(f"penalty must be 'ratio' or 'log', got {config.penalty!r}")

    for key in _PATH_KEYS:
        value = getattr(config, key)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"{key} path does not exist: {value}")
    return config


def load_run_config(
    config_path: str | Path | None,
    overrides: Mapping[str, str] | None = None,
) -> RunConfig:
    """Load a config file (optional) and apply overrides."""
    if config_path is not None:
        values = read_config_file(config_path)
        base_dir = Path(config_path).parent
    else:
        values = {}
        base_dir = Path.cwd()
    return build_run_config(values, base_dir, overrides)
