"""Experiment configuration: one JSON document parsed into dataclasses."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from fedmerge.baselines import METHODS as BASELINE_METHODS
from fedmerge.baselines import BaselineConfig
from fedmerge.data import ClientDataset, ClusterTruthSpec, ColumnSchema, FederationSpec, generate_federation, load_csv_federation
from fedmerge.models import ModelSpec
from fedmerge.server import ServerConfig

METHODS = ("fedmerge",) + BASELINE_METHODS
ENV_OUTPUT_DIR = "FEDMERGE_OUTPUT_DIR"
ENV_THREADS = "FEDMERGE_THREADS"


class ConfigError(ValueError):
    """A config problem, prefixed with the dotted path of the offending field."""


@dataclass
class BaselineParams:
    d: int = 1
    finetune_epochs: int = 0
    ifca_split: str = "train"


@dataclass
class DataSource:
    """Optional CSV input; synthetic generation is used when ``csv_paths`` is empty."""

    csv_paths: list[str] = field(default_factory=list)
    label_column: str = "label"
    standardize: bool = True


@dataclass
class ExperimentConfig:
    federation: FederationSpec = field(default_factory=FederationSpec)
    truth: ClusterTruthSpec = field(default_factory=ClusterTruthSpec)
    data: DataSource = field(default_factory=DataSource)
    model: ModelSpec = field(default_factory=ModelSpec)
    method: str = "fedmerge"
    server: ServerConfig = field(default_factory=ServerConfig)
    baseline: BaselineParams = field(default_factory=BaselineParams)
    eval_every: int = 1
    snapshot_every: int = 10
    output_dir: str = "runs/default"
    seeds: list[int] = field(default_factory=lambda: [0])
    # descent subcommand
    descent_rounds: int = 100
    descent_multiplier: float = 0.1
    smoothness_probes: int = 20

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown {self.method!r}; choose from {METHODS}")
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        if any((not isinstance(s, int)) or s < 0 for s in self.seeds):
            raise ConfigError("seeds: entries must be non-negative integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: entries must be distinct")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be >= 1")
        if self.snapshot_every < 1:
            raise ConfigError("snapshot_every: must be >= 1")
        if self.descent_rounds < 1 or self.descent_multiplier <= 0 or self.smoothness_probes < 2:
            raise ConfigError("descent_rounds >= 1, descent_multiplier > 0 and smoothness_probes >= 2 required")
        m = len(self.data.csv_paths) or self.federation.m
        _wrap("server", lambda: self.server.validate(m))
        if self.method != "fedmerge":
            _wrap("baseline", lambda: self.baseline_config(self.seeds[0]).validate(m))

    def server_config(self, seed: int) -> ServerConfig:
        return dataclasses.replace(self.server, seed=seed)

    def baseline_config(self, seed: int) -> BaselineConfig:
        s = self.server
        return BaselineConfig(
            method=self.method,
            d=self.baseline.d,
            finetune_epochs=self.baseline.finetune_epochs,
            rounds=s.rounds,
            clients_per_round=s.clients_per_round,
            eta_loc=s.eta_loc,
            local_epochs=s.local_epochs,
            batch_size=s.batch_size,
            seed=seed,
            ifca_split=self.baseline.ifca_split,
        )

    def build_clients(self) -> list[ClientDataset]:
        if self.data.csv_paths:
            schema = ColumnSchema(
                label_column=self.data.label_column,
                fractions=self.federation.fractions,
                seed=self.federation.seed,
                standardize=self.data.standardize,
            )
            return load_csv_federation(self.data.csv_paths, schema)
        return generate_federation(self.federation, self.truth)

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self), default=_json_default))


def _json_default(obj: Any) -> Any:
    if hasattr(obj, "value"):
        return obj.value
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _wrap(prefix: str, fn) -> Any:
    try:
        return fn()
    except ConfigError as exc:
        raise ConfigError(f"{prefix}.{exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}: unknown field")
    kwargs = {}
    for key, value in raw.items():
        if isinstance(value, list) and key in ("fractions", "sizes", "cluster_sizes"):
            value = tuple(value) if key == "fractions" else list(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


_SECTIONS = {
    "federation": FederationSpec,
    "truth": ClusterTruthSpec,
    "data": DataSource,
    "model": ModelSpec,
    "server": ServerConfig,
    "baseline": BaselineParams,
}


def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(f"{key}: unknown field")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "seeds":
            if not isinstance(value, list):
                raise ConfigError("seeds: expected a list of integers")
            kwargs[key] = list(value)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    for name in ("eval_every", "snapshot_every", "descent_rounds", "smoothness_probes"):
        if not isinstance(getattr(cfg, name), int) or isinstance(getattr(cfg, name), bool):
            raise ConfigError(f"{name}: expected an integer")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw)


def apply_overrides(
    cfg: ExperimentConfig, seed: int | None = None, threads: int | None = None, out: str | None = None
) -> ExperimentConfig:
    """CLI flags win over environment variables, which win over the file."""
    env_out = os.environ.get(ENV_OUTPUT_DIR)
    env_threads = os.environ.get(ENV_THREADS)
    if out is None and env_out:
        out = env_out
    if threads is None and env_threads:
        try:
            threads = int(env_threads)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS}: expected an integer, got {env_threads!r}") from None
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seeds"] = [seed]
    if out is not None:
        changes["output_dir"] = out
    cfg = dataclasses.replace(cfg, **changes)
    if threads is not None:
        if threads < 1:
            raise ConfigError("threads: must be >= 1")
        cfg.server = dataclasses.replace(cfg.server, threads=threads)
    return cfg
