"""Run configuration: one YAML document, environment overrides on top."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml

from .coexpand import CoExpansionConfig
from .dataset.pipeline import PipelineConfig
from .errors import ConfigurationError
from .oracles.types import ErrorInjectionProfile
from .robust_eval import DEPTHS

ENV_STORE = "ROBUSTSYNTH_STORE"
MODES = ("synthesize", "evaluate", "dataset", "report")
ORACLE_MODES = ("scripted", "remote")


def _section(d: Mapping[str, Any], key: str) -> Dict[str, Any]:
    v = d.get(key) or {}
    if not isinstance(v, Mapping):
        raise ConfigurationError(f"config section {key!r} must be a mapping")
    return dict(v)


def _only(d: Mapping[str, Any], allowed, where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class TasksConfig:
    """How ``tasks init`` populates the store."""

    count: int = 10
    seed: int = 0
    stochasticity: float = 0.0
    max_steps: int = 30
    prefix: str = "desk"


@dataclass
class EvalConfig:
    depths: List[int] = field(default_factory=lambda: list(DEPTHS))
    runs: int = 3
    seed: int = 0
    agent: str = "oracle-recovery"
    agent_options: Dict[str, Any] = field(default_factory=dict)


@dataclass
class DatasetConfig:
    lambda_ref: float = 0.1
    total: Optional[int] = None
    seed: int = 0
    name: str = "train"


@dataclass
class OracleConfig:
    mode: str = "scripted"
    policy: ErrorInjectionProfile = field(default_factory=lambda: ErrorInjectionProfile.uniform(0.08, 0.3))
    recovery_policy: Optional[ErrorInjectionProfile] = None
    remote: Dict[str, Any] = field(default_factory=dict)


@dataclass
class RunConfig:
    store: Path
    tasks_glob: str = "*.json"
    mode: str = "synthesize"
    workers: int = 1
    base_seed: int = 0
    co_expansion: CoExpansionConfig = field(default_factory=CoExpansionConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    oracles: OracleConfig = field(default_factory=OracleConfig)
    tasks: TasksConfig = field(default_factory=TasksConfig)

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ConfigurationError("worker budget must be >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.oracles.mode not in ORACLE_MODES:
            raise ConfigurationError(f"oracles.mode must be one of {ORACLE_MODES}")
        if self.eval.runs < 1:
            raise ConfigurationError("eval.runs must be >= 1")
        # the co-expansion seed always follows the run's base seed
        self.co_expansion.base_seed = self.base_seed

    @classmethod
    def from_dict(cls, d: Optional[Mapping[str, Any]], base_dir: Optional[Path] = None) -> "RunConfig":
        d = dict(d or {})
        _only(d, ("store", "tasks_glob", "mode", "workers", "base_seed", "co_expansion", "pipeline", "dataset",
                  "eval", "oracles", "tasks"), "top-level")
        store = os.environ.get(ENV_STORE) or d.get("store") or "store"
        store = Path(store)
        if not store.is_absolute() and base_dir is not None and not os.environ.get(ENV_STORE):
            store = base_dir / store
        try:
            co = CoExpansionConfig.from_dict(_section(d, "co_expansion"))
            pipe = PipelineConfig.from_dict(_section(d, "pipeline"))
            ds = _section(d, "dataset")
            _only(ds, DatasetConfig.__dataclass_fields__, "dataset")
            ev = _section(d, "eval")
            _only(ev, EvalConfig.__dataclass_fields__, "eval")
            tk = _section(d, "tasks")
            _only(tk, TasksConfig.__dataclass_fields__, "tasks")
            orc = _section(d, "oracles")
            _only(orc, ("mode", "policy", "recovery_policy", "remote"), "oracles")
            oracles = OracleConfig(
                mode=orc.get("mode", "scripted"),
                policy=ErrorInjectionProfile.from_dict(orc["policy"]) if "policy" in orc
                else ErrorInjectionProfile.uniform(0.08, 0.3),
                recovery_policy=ErrorInjectionProfile.from_dict(orc["recovery_policy"])
                if orc.get("recovery_policy") is not None else None,
                remote=dict(orc.get("remote") or {}),
            )
            return cls(store=store, tasks_glob=str(d.get("tasks_glob", "*.json")),
                       mode=str(d.get("mode", "synthesize")), workers=int(d.get("workers", 1)),
                       base_seed=int(d.get("base_seed", 0)), co_expansion=co, pipeline=pipe,
                       dataset=DatasetConfig(**ds), eval=EvalConfig(**ev), oracles=oracles,
                       tasks=TasksConfig(**tk))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "store": str(self.store), "tasks_glob": self.tasks_glob, "mode": self.mode, "workers": self.workers,
            "base_seed": self.base_seed, "co_expansion": asdict(self.co_expansion),
            "pipeline": asdict(self.pipeline), "dataset": asdict(self.dataset), "eval": asdict(self.eval),
            "oracles": {"mode": self.oracles.mode, "policy": self.oracles.policy.to_dict(),
                        "recovery_policy": self.oracles.recovery_policy.to_dict()
                        if self.oracles.recovery_policy else None,
                        "remote": dict(self.oracles.remote)},
            "tasks": asdict(self.tasks),
        }

    def synthesis_key(self) -> str:
        """Digest of everything that shapes a tree; workers and paths are excluded."""
        d = self.to_dict()
        body = {"base_seed": d["base_seed"], "co_expansion": d["co_expansion"], "oracles": d["oracles"]}
        body["oracles"] = {k: v for k, v in body["oracles"].items() if k != "remote"}
        return hashlib.blake2b(json.dumps(body, sort_keys=True).encode("utf-8"), digest_size=6).hexdigest()


def load_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, Mapping):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    return RunConfig.from_dict(data, base_dir=path.parent)
