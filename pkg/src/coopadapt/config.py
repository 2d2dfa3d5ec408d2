"""Experiment configuration: one JSON tree, merged over defaults, strictly validated.

The schema is the tree of defaults itself. A user file may give any subset of
keys; a key absent from the defaults, or a value of the wrong kind, is an
error. ``COOPADAPT_SEED`` overrides the seed.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from coopadapt.adapters import AdapterConfig
from coopadapt.detector.grid import PE_MODES
from coopadapt.detector.model import DetectorConfig
from coopadapt.training import PseudoLabelConfig, TrainConfig

SEED_ENV = "COOPADAPT_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    profiles: dict = field(default_factory=lambda: {"source": "synthetic_sim", "target": "synthetic_real"})
    paths: dict = field(default_factory=lambda: {"source": "data/source", "target": "data/target",
                                                 "runs": "runs"})
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    pe_mode: str = "offset"
    pseudo_label: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seed": self.seed,
            "profiles": dict(self.profiles),
            "paths": dict(self.paths),
            "detector": self.detector.to_dict(),
            "train": train,
            "adapters": self.adapters.to_dict(),
            "pe_mode": self.pe_mode,
            "pseudo_label": self.pseudo_label.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        resolved = _merge(cls().to_dict(), d, "")
        try:
            if resolved["pe_mode"] not in PE_MODES:
                raise ConfigError(f"pe_mode must be one of {sorted(PE_MODES)}")
            return cls(
                seed=int(resolved["seed"]),
                profiles=resolved["profiles"],
                paths=resolved["paths"],
                detector=DetectorConfig.from_dict(resolved["detector"]),
                train=TrainConfig.from_dict({**resolved["train"], "seed": int(resolved["seed"])}),
                adapters=AdapterConfig.from_dict(resolved["adapters"]),
                pe_mode=resolved["pe_mode"],
                pseudo_label=PseudoLabelConfig.from_dict(resolved["pseudo_label"]),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def digest(self) -> str:
        """Hash of everything except the seed, so seeds of one setup group together."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self, name: str = "") -> Path:
        base = Path(self.paths["runs"]) / f"{self.digest()}-seed{self.seed}"
        return base / name if name else base

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _kind(v):
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, (list, tuple)):
        return "list"
    if isinstance(v, dict):
        return "object"
    return "null" if v is None else type(v).__name__


def _merge(defaults: dict, user, path: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {_kind(user)}")
    out = dict(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        default = defaults[key]
        if isinstance(default, dict) and key not in ("profiles", "paths"):
            out[key] = _merge(default, value, where)
            continue
        if isinstance(default, dict):
            extra = set(value) - set(default) if isinstance(value, dict) else set()
            if extra:
                raise ConfigError(f"unknown config key {where}.{sorted(extra)[0]!r}")
            out[key] = {**default, **_merge(default, value, where)}
            continue
        if default is not None and value is not None and _kind(default) != _kind(value):
            raise ConfigError(f"{where}: expected {_kind(default)}, got {_kind(value)}")
        if default is not None and value is None:
            raise ConfigError(f"{where}: must not be null")
        out[key] = value
    return out


def load_config(path=None, env=None) -> ExperimentConfig:
    """Defaults, overlaid by the JSON file at ``path``, then by the seed env var."""
    env = os.environ if env is None else env
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = ExperimentConfig.from_dict(data)
    if env.get(SEED_ENV):
        try:
            cfg = cfg.with_seed(int(env[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return cfg
