"""Run configuration: defaults, config-file parsing, CLI overrides.

Config files are plain ``key = value`` lines (``#`` comments allowed). Keys
match the RunConfig field names below; unknown keys are rejected so typos
fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError, NotFoundError


@dataclass
class RunConfig:
    dim: int = 64
    seed: int = 7
    batch_size: int = 8
    prebatch_batches: int = 2
    epochs: int = 60
    learning_rate: float = 0.5
    lambda1: float = 4.0
    lambda2: float = 1.0
    max_phrase_len: int = 20
    token_budget: int = 64
    k: int = 100
    cutoff: int = 10
    topk_passages: int = 5
    reps: int = 5
    warmup: int = 2
    finetune_topk: int = 100
    finetune_epochs: int = 30

    def validate(self) -> "RunConfig":
        if self.dim < 2:
            raise ConfigurationError(f"dim must be >= 2, got {self.dim}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.prebatch_batches < 0:
            raise ConfigurationError("prebatch_batches must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        for name in ("epochs", "max_phrase_len", "token_budget", "k", "cutoff",
                     "topk_passages", "reps", "finetune_topk", "finetune_epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.warmup < 0:
            raise ConfigurationError("warmup must be >= 0")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    try:
        if kind in ("int",):
            return int(raw)
        if kind in ("float",):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"config key {name}: cannot parse {raw!r}") from exc
    return raw


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" in stripped:
            key, _, raw = stripped.partition("=")
        else:
            key, _, raw = stripped.partition(" ")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
        if not raw:
            raise ConfigurationError(f"config line {lineno}: missing value for {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(config_path=None, **overrides) -> RunConfig:
    """File values first, then non-None keyword overrides on top."""
    values = load_config_file(config_path) if config_path else {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"unknown config override: {key}")
        values[key] = value
    return RunConfig(**values).validate()
