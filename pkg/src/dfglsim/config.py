"""Run configuration: dataclasses, file loading with strict key checking, seed derivation."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .ddpgctl import AgentConfig
from .errors import ConfigurationError
from .gcnmodel import Hyperparams


@dataclass
class GraphConfig:
    num_nodes: int = 400
    num_classes: int = 4
    p_intra: float = 0.08
    p_inter: float = 0.004
    d0: int = 16
    feature_margin: float = 1.0
    test_fraction: float = 0.2
    edge_file: str | None = None  # optional real graph instead of the SBM
    table_file: str | None = None


@dataclass
class PartitionConfig:
    alpha: float = 1.0
    min_size: int = 10


@dataclass
class NetworkConfig:
    b_min: float = 5.0
    b_max: float = 20.0
    speed_tiers: tuple[float, ...] = (1.0, 2.0, 4.0)
    tier_probs: tuple[float, ...] = (0.4, 0.5, 0.1)
    cost_per_row: float = 1e-5

    def __post_init__(self) -> None:
        self.speed_tiers = tuple(float(s) for s in self.speed_tiers)
        self.tier_probs = tuple(float(p) for p in self.tier_probs)
        if len(self.speed_tiers) != len(self.tier_probs) or not self.speed_tiers:
            raise ConfigurationError("speed_tiers and tier_probs must have equal, nonzero length")
        if abs(sum(self.tier_probs) - 1.0) > 1e-9:
            raise ConfigurationError("tier_probs must sum to 1")
        if not 0 < self.b_min <= self.b_max:
            raise ConfigurationError("need 0 < b_min <= b_max")


@dataclass
class SimConfig:
    seed: int = 0
    workers: int = 8
    rounds: int = 60
    tau: int = 5
    policy: str = "complete"
    target_accuracy: float | None = None
    private_first_layer: bool = True
    shared_init: bool = True  # every worker starts from the same initial model
    observability: str = "adjacent"  # pairwise model distances the coordinator sees: adjacent | all
    reward_consensus: str = "estimate"  # estimate | exact
    parallel: int = 0  # worker threads for local training; 0 = sequential
    out_dir: str | None = None
    graph: GraphConfig = field(default_factory=GraphConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: Hyperparams = field(default_factory=Hyperparams)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.tau < 0:
            raise ConfigurationError("tau must be >= 0")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.observability not in ("all", "adjacent"):
            raise ConfigurationError("observability must be 'all' or 'adjacent'")
        if self.reward_consensus not in ("estimate", "exact"):
            raise ConfigurationError("reward_consensus must be 'estimate' or 'exact'")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            raise ConfigurationError("target_accuracy must be in (0, 1]")
        if self.parallel < 0:
            raise ConfigurationError("parallel must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


_SECTIONS = {
    "graph": GraphConfig,
    "partition": PartitionConfig,
    "model": Hyperparams,
    "network": NetworkConfig,
    "agent": AgentConfig,
}


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return cls(**data)


def config_from_dict(data: dict[str, Any] | None) -> SimConfig:
    data = dict(data or {})
    known = {f.name for f in fields(SimConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS:
            kwargs[k] = _build(_SECTIONS[k], dict(v or {}), k)
        else:
            kwargs[k] = v
    return SimConfig(**kwargs)


def load_config(path: str | Path) -> SimConfig:
    """Read a YAML (or JSON) config file; unknown keys are errors."""
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(data)


def seed_for(master: int, name: str) -> int:
    """Independent, stable integer seed for a named random stream."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def rng_for(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_for(master, name))


def replace_section(cfg: SimConfig, **overrides: Any) -> SimConfig:
    """Copy of ``cfg`` with top-level fields overridden (sections may be given as dicts)."""
    data = cfg.to_dict()
    for k, v in overrides.items():
        if k in _SECTIONS and isinstance(v, dict):
            data[k] = {**data[k], **v}
        elif is_dataclass(v):
            data[k] = asdict(v)
        else:
            data[k] = v
    return config_from_dict(data)
