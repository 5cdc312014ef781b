"""Value types exchanged with the oracles."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

from ..env.actions import Action, canonical
from ..env.desk import Observation
from ..errors import ConfigurationError

ERROR_TYPES = (
    "incorrect_ui_element",
    "grounding_failure",
    "ineffective_action",
    "typing_error",
    "miss_necessary_step",
    "incorrect_tool_usage",
    "wrong_target",
    "incorrect_parameter",
    "misunderstand_objective",
    "fail_to_terminate",
    "lack_of_knowledge",
)

# Label for a non-useful step taken while an earlier error went unnoticed.
PROPAGATED = "propagated"


@dataclass
class HistoryStep:
    """One past step as the agent sees it."""

    observation: Observation  # observation the action was taken from
    output: str
    action: Action


@dataclass
class Proposal:
    thought: str
    action: Action
    injection: Optional[str] = None
    reflect: bool = False

    @property
    def output(self) -> str:
        return format_output(self.thought, self.action)


def format_output(thought: str, action: Action) -> str:
    return f"THOUGHT: {thought}\nACTION: {canonical(action)}"


def output_thought(output: str) -> str:
    head = output.split("\nACTION:", 1)[0]
    return head[len("THOUGHT: "):] if head.startswith("THOUGHT: ") else head


@dataclass
class TrajectoryExperience:
    procedures: List[str]
    transitions: List[Dict[str, Any]]
    diagnosis: Dict[str, Any]

    def to_dict(self) -> dict:
        return {"procedures": list(self.procedures), "transitions": [dict(t) for t in self.transitions],
                "diagnosis": dict(self.diagnosis)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrajectoryExperience":
        return cls(list(d.get("procedures", [])), [dict(t) for t in d.get("transitions", [])],
                   dict(d.get("diagnosis", {})))


@dataclass
class RewardVerdict:
    r: int
    experience: TrajectoryExperience


@dataclass
class ProgressVerdict:
    c: int
    reason: str


@dataclass
class CandidateErrorProposal:
    node_id: int
    guidance: str
    priority: float
    step: int = 0  # 1-based position of the node on the failed path
    source_leaf: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.priority <= 1.0:
            raise ValueError(f"priority {self.priority} outside [0, 1]")


@dataclass
class ErrorInjectionProfile:
    rates: Dict[str, float] = field(default_factory=dict)
    recovery_competence: float = 0.0
    forced: Dict[int, str] = field(default_factory=dict)  # 1-based step -> error type

    def __post_init__(self) -> None:
        for k, v in list(self.rates.items()) + [("recovery_competence", self.recovery_competence)]:
            if k != "recovery_competence" and k not in ERROR_TYPES:
                raise ConfigurationError(f"unknown error type {k!r}")
            if not 0.0 <= float(v) <= 1.0:
                raise ConfigurationError(f"probability for {k} outside [0, 1]")
        for step_no, kind in self.forced.items():
            if kind not in ERROR_TYPES:
                raise ConfigurationError(f"unknown forced error type {kind!r}")
        self.forced = {int(k): v for k, v in self.forced.items()}

    @property
    def total_rate(self) -> float:
        return min(1.0, sum(self.rates.values()))

    @classmethod
    def uniform(cls, total: float, recovery_competence: float = 0.0) -> "ErrorInjectionProfile":
        return cls({t: total / len(ERROR_TYPES) for t in ERROR_TYPES}, recovery_competence)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ErrorInjectionProfile":
        if "total" in d:
            base = cls.uniform(float(d["total"]), float(d.get("recovery_competence", 0.0)))
            return cls(base.rates, base.recovery_competence, dict(d.get("forced", {})))
        return cls(dict(d.get("rates", {})), float(d.get("recovery_competence", 0.0)),
                   dict(d.get("forced", {})))

    def to_dict(self) -> dict:
        return {"rates": dict(sorted(self.rates.items())), "recovery_competence": self.recovery_competence,
                "forced": {str(k): v for k, v in sorted(self.forced.items())}}


def require_states(observations: Sequence[Observation]) -> None:
    from ..errors import IntegrityError

    for o in observations:
        if o is None or o.state is None:
            raise IntegrityError("trajectory references an observation without stored state")
