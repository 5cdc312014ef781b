"""Oracle contracts: scripted implementations and a remote adapter."""

from .reflection import detect_reflection, has_reflection, reflect_marker
from .scripted import (OracleSet, PathView, ScriptedActionCritic, ScriptedJudge, ScriptedPolicy,
                       ScriptedProgressCritic, ScriptedRecoveryActor, ScriptedReflector, scripted_oracles)
from .types import (ERROR_TYPES, PROPAGATED, CandidateErrorProposal, ErrorInjectionProfile, HistoryStep,
                    ProgressVerdict, Proposal, RewardVerdict, TrajectoryExperience, format_output)

__all__ = [
    "detect_reflection", "has_reflection", "reflect_marker", "OracleSet", "PathView",
    "ScriptedActionCritic", "ScriptedJudge", "ScriptedPolicy", "ScriptedProgressCritic",
    "ScriptedRecoveryActor", "ScriptedReflector", "scripted_oracles", "ERROR_TYPES", "PROPAGATED",
    "CandidateErrorProposal", "ErrorInjectionProfile", "HistoryStep", "ProgressVerdict", "Proposal",
    "RewardVerdict", "TrajectoryExperience", "format_output",
]
