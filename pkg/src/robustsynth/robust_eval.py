"""Error-depth robustness evaluation.

A test case replays a verified error-free prefix, the root-cause action and
``d`` further actions from a failed trajectory, then hands control to the
agent under test.  Awareness is read from the agent's first output only;
success is the task verdict at the end of the episode.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .env.actions import Action, Terminate, canonical, parse
from .env.desk import (Observation, SnapshotRegistry, TaskSpec, replay_prefix, step)
from .env.model import desk_model, task_succeeded
from .errors import CaseInvalid, CaseRejected, IncompleteResults
from .oracles.reflection import detect_reflection, reflect_marker
from .oracles.scripted import ScriptedActionCritic, ScriptedPolicy, ScriptedProgressCritic
from .oracles.types import ERROR_TYPES, ErrorInjectionProfile, HistoryStep, Proposal, format_output

log = logging.getLogger(__name__)

DEPTHS = (0, 1, 3, 5)
EVAL_BUDGET = 50


@dataclass
class TestCase:
    __test__ = False  # not a pytest class

    case_id: str
    task: TaskSpec
    verified_prefix: List[Action]
    root_cause_index: int  # 1-based step number of the erroneous action
    root_cause_action: Action
    error_types: List[str]
    depth: int
    post_error_actions: List[Action]
    expected_hashes: List[str]

    def __post_init__(self) -> None:
        if self.depth not in DEPTHS:
            raise ValueError(f"depth must be one of {DEPTHS}")
        if len(self.post_error_actions) != self.depth:
            raise ValueError("post-error action count must equal depth")
        if not self.error_types or any(t not in ERROR_TYPES for t in self.error_types):
            raise ValueError("error types must be a non-empty subset of the taxonomy")
        if len(self.verified_prefix) + 1 + self.depth > EVAL_BUDGET:
            raise ValueError("injected steps exceed the evaluation budget")

    @property
    def injected_actions(self) -> List[Action]:
        return list(self.verified_prefix) + [self.root_cause_action] + list(self.post_error_actions)

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "task": self.task.to_dict(),
                "verified_prefix": [canonical(a) for a in self.verified_prefix],
                "root_cause_index": self.root_cause_index,
                "root_cause_action": canonical(self.root_cause_action),
                "error_types": list(self.error_types), "depth": self.depth,
                "post_error_actions": [canonical(a) for a in self.post_error_actions],
                "expected_hashes": list(self.expected_hashes)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TestCase":
        return cls(d["case_id"], TaskSpec.from_dict(d["task"]), [parse(a) for a in d["verified_prefix"]],
                   int(d["root_cause_index"]), parse(d["root_cause_action"]), list(d["error_types"]),
                   int(d["depth"]), [parse(a) for a in d["post_error_actions"]], list(d["expected_hashes"]))


def save_case(case: TestCase, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{case.case_id}.json"
    path.write_text(json.dumps(case.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_cases(directory: Path) -> List[TestCase]:
    return [TestCase.from_dict(json.loads(p.read_text(encoding="utf-8")))
            for p in sorted(Path(directory).glob("*.json"))]


# ---------------------------------------------------------------------------
# construction


def build_test_cases(task: TaskSpec, actions: Sequence[Action], observations: Sequence[Observation],
                     injection_log: Sequence[Optional[str]], depths: Iterable[int] = DEPTHS,
                     case_prefix: Optional[str] = None, registry: Optional[SnapshotRegistry] = None,
                     budget: int = EVAL_BUDGET) -> List[TestCase]:
    """Cases for one failed trajectory, one per feasible depth.

    ``injection_log[i]`` labels step ``i + 1``; the first step carrying a
    taxonomy label is the root cause.
    """
    if len(observations) != len(actions) + 1 or len(injection_log) != len(actions):
        raise CaseRejected("trajectory, observations and injection log disagree in length")
    root = next((i for i, lab in enumerate(injection_log) if lab in ERROR_TYPES), None)
    if root is None:
        raise CaseRejected("injection log names no root-cause step")
    if isinstance(actions[root], Terminate):
        raise CaseRejected("root cause ends the episode; nothing to take over")
    progress = ScriptedProgressCritic(task, registry)
    verify = ScriptedActionCritic(task, registry)
    for i in range(root):
        if progress.assess_progress(task, observations[i], actions[i]).c != 1 or \
                not verify.verify_action(observations[i], actions[i], observations[i + 1]):
            raise CaseRejected(f"prefix step {i + 1} fails critic verification")
    post = []
    for a in actions[root + 1:]:
        if isinstance(a, Terminate):
            break
        post.append(a)
    eval_task = replace(task, max_steps=budget)
    prefix = list(actions[:root])
    cases = []
    for d in sorted(set(depths)):
        if d > len(post):
            log.info("%s: depth %d skipped, only %d post-error steps", task.task_id, d, len(post))
            continue
        injected = prefix + [actions[root]] + post[:d]
        if len(injected) > budget:
            log.info("%s: depth %d skipped, injected history exceeds budget", task.task_id, d)
            continue
        handle, obs = replay_prefix(eval_task, injected, None, registry, 0)
        if progress.assess_progress(task, obs[root], actions[root]).c == 1:
            raise CaseRejected("root-cause action is not an error on replay")
        cid = f"{case_prefix or task.task_id}-d{d}"
        cases.append(TestCase(cid, task, prefix, root + 1, actions[root], [injection_log[root]], d,
                              post[:d], [o.state_hash for o in obs]))
    return cases


# ---------------------------------------------------------------------------
# agents


def _replayed_output(action: Action) -> str:
    return format_output("(replayed step)", action)


class OracleRecoveryAgent:
    """Notices any earlier step that did not advance the task, says so, then
    follows the exact plan."""

    name = "oracle-recovery"

    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None):
        self.policy = ScriptedPolicy(task, ErrorInjectionProfile(recovery_competence=1.0), registry,
                                     policy_id=self.name)

    def propose(self, u, obs, history, rng) -> Proposal:
        return self.policy.propose(u, obs, history, rng)


class FrozenAgent:
    """Repeats the last action of its history forever."""

    name = "frozen"

    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None):
        self.task = task

    def propose(self, u, obs, history, rng) -> Proposal:
        a = history[-1].action if history else parse("SCROLL(down,0)")
        if isinstance(a, Terminate):
            a = parse("SCROLL(down,0)")
        return Proposal("Doing the same thing again.", a)


class DecayAgent:
    """Recovers with probability ``p * decay**d`` where ``d`` is the number of
    steps since its first mistake; otherwise it is frozen."""

    name = "decay"

    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None, p: float = 0.9,
                 decay: float = 0.7):
        self.oracle = OracleRecoveryAgent(task, registry)
        self.frozen = FrozenAgent(task, registry)
        self.p = p
        self.decay = decay
        self._recover: Optional[bool] = None

    def reset(self) -> None:
        self._recover = None

    def propose(self, u, obs, history, rng) -> Proposal:
        if self._recover is None:
            j = self.oracle.policy.unacknowledged_error(history)
            d = 0 if j is None else len(history) - (j + 1)
            self._recover = bool(rng.random() < self.p * self.decay ** d)
        return (self.oracle if self._recover else self.frozen).propose(u, obs, history, rng)


AGENTS = {"oracle-recovery": OracleRecoveryAgent, "frozen": FrozenAgent, "decay": DecayAgent}


def make_agent(name: str, task: TaskSpec, registry: Optional[SnapshotRegistry] = None, **kw):
    if name.startswith(("http://", "https://")):
        from .oracles.remote import RemoteAgent, RemoteClient, RemoteConfig

        return RemoteAgent(RemoteClient(RemoteConfig.from_mapping({"endpoint": name, **kw})), name)
    try:
        return AGENTS[name](task, registry, **kw)
    except KeyError:
        from .errors import ConfigurationError

        raise ConfigurationError(f"unknown agent {name!r}; choose from {sorted(AGENTS)} or a URL") from None


# ---------------------------------------------------------------------------
# running


@dataclass
class CaseResult:
    aware: int
    success: int
    steps_used: int


def run_case(agent, case: TestCase, step_budget: int = EVAL_BUDGET, rng: Optional[np.random.Generator] = None,
             registry: Optional[SnapshotRegistry] = None, reflection_judge: Callable = detect_reflection
             ) -> CaseResult:
    rng = rng if rng is not None else np.random.default_rng(0)
    eval_task = replace(case.task, max_steps=step_budget)
    injected = case.injected_actions
    handle, observations = replay_prefix(eval_task, injected, case.expected_hashes, registry, 0)
    if handle.diverged or len(observations) != len(case.expected_hashes):
        raise CaseInvalid(f"{case.case_id}: replay does not match the recorded hashes")
    history = [HistoryStep(observations[i], _replayed_output(a), a) for i, a in enumerate(injected)]
    if hasattr(agent, "reset"):
        agent.reset()
    obs = observations[-1]
    aware = 0
    first = True
    while not handle.terminated and handle.step_count < step_budget:
        p = agent.propose(case.task, obs, history, rng)
        if first:
            aware = int(reflection_judge(case.task, history, p.output))
            first = False
        nobs = step(handle, p.action)
        history.append(HistoryStep(obs, p.output, p.action))
        obs = nobs
    return CaseResult(aware, int(task_succeeded(case.task, handle.state)), handle.step_count)


@dataclass
class RunRecord:
    case_id: str
    task_id: str
    agent: str
    depth: int
    error_type: str
    run: int
    aware: int
    success: int
    steps_used: int


def run_suite(agent_name: str, cases: Sequence[TestCase], runs: int, seed: int = 0,
              registry: Optional[SnapshotRegistry] = None, agent_kwargs: Optional[dict] = None
              ) -> Tuple[List[RunRecord], List[str]]:
    """Run every case ``runs`` times; returns records and ids of invalid cases."""
    from .coexpand import derive_seed

    records, invalid = [], []
    for case in cases:
        agent = make_agent(agent_name, case.task, registry, **(agent_kwargs or {}))
        try:
            for r in range(runs):
                rng = np.random.default_rng(derive_seed(seed, r, *case.case_id.encode("utf-8")))
                res = run_case(agent, case, EVAL_BUDGET, rng, registry)
                records.append(RunRecord(case.case_id, case.task.task_id, agent_name, case.depth,
                                         case.error_types[0], r, res.aware, res.success, res.steps_used))
        except CaseInvalid as exc:
            log.warning("%s", exc)
            invalid.append(case.case_id)
            records = [x for x in records if x.case_id != case.case_id]
    return records, invalid


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class EvalReport:
    rows: List[dict]  # per (agent, depth, error_type) including error_type "all"
    all_pass: Dict[str, int]  # case id -> 1 iff every run succeeded
    depth_success: Dict[str, Dict[int, float]]
    drop_percent: Dict[str, Optional[int]]
    runs_per_case: int


def relative_drop(rate_d0: float, rate_d5: float) -> Optional[int]:
    if rate_d0 <= 0:
        return None
    return int(np.floor(100.0 * (rate_d0 - rate_d5) / rate_d0 + 0.5))


def aggregate(results: Sequence[RunRecord], runs_per_case: int) -> EvalReport:
    by_case: Dict[Tuple[str, str], List[RunRecord]] = {}
    for r in results:
        by_case.setdefault((r.agent, r.case_id), []).append(r)
    for (agent, cid), rs in by_case.items():
        if len({r.run for r in rs}) != runs_per_case or len(rs) != runs_per_case:
            raise IncompleteResults(f"case {cid} for {agent} has {len(rs)} of {runs_per_case} runs")
    groups: Dict[Tuple[str, int, str], List[RunRecord]] = {}
    for r in results:
        groups.setdefault((r.agent, r.depth, r.error_type), []).append(r)
        groups.setdefault((r.agent, r.depth, "all"), []).append(r)
    all_pass = {f"{a}/{cid}": int(all(r.success for r in rs)) for (a, cid), rs in sorted(by_case.items())}
    rows = []
    for (agent, depth, etype) in sorted(groups):
        rs = groups[(agent, depth, etype)]
        cases = {r.case_id for r in rs}
        rows.append({"agent": agent, "depth": depth, "error_type": etype, "runs": len(rs),
                     "awareness_rate": sum(r.aware for r in rs) / len(rs),
                     "success_rate": sum(r.success for r in rs) / len(rs),
                     "all_pass_rate": sum(all_pass[f"{agent}/{c}"] for c in cases) / len(cases)})
    depth_success: Dict[str, Dict[int, float]] = {}
    for row in rows:
        if row["error_type"] == "all":
            depth_success.setdefault(row["agent"], {})[row["depth"]] = row["success_rate"]
    drops = {a: (relative_drop(d[0], d[5]) if 0 in d and 5 in d else None) for a, d in depth_success.items()}
    return EvalReport(rows, all_pass, depth_success, drops, runs_per_case)


CSV_FIELDS = ("agent", "depth", "error_type", "runs", "awareness_rate", "success_rate", "all_pass_rate")


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in report.rows:
        w.writerow([row["agent"], row["depth"], row["error_type"], row["runs"]] +
                   [f"{row[k]:.4f}" for k in ("awareness_rate", "success_rate", "all_pass_rate")])
    return buf.getvalue()


def report_summary(report: EvalReport) -> str:
    lines = [f"Post-error success by error depth ({report.runs_per_case} runs per case)", ""]
    head = "agent".ljust(18) + "".join(f"d={d}".rjust(9) for d in DEPTHS) + "   drop d0->d5   awareness"
    lines += [head, "-" * len(head)]
    for agent in sorted(report.depth_success):
        ds = report.depth_success[agent]
        cells = "".join((f"{100 * ds[d]:8.1f}%" if d in ds else "       --") for d in DEPTHS)
        drop = report.drop_percent.get(agent)
        drop_s = f"{drop}%" if drop is not None else "n/a"
        aw = [r for r in report.rows if r["agent"] == agent and r["error_type"] == "all"]
        aware = sum(r["awareness_rate"] * r["runs"] for r in aw) / max(1, sum(r["runs"] for r in aw))
        lines.append(agent.ljust(18) + cells + drop_s.rjust(14) + f"{100 * aware:11.1f}%")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory: Path, stem: str = "eval") -> Tuple[Path, Path]:
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{stem}.csv"
    txt_path = directory / f"{stem}.summary.txt"
    csv_path.write_text(report_csv(report), encoding="utf-8")
    txt_path.write_text(report_summary(report), encoding="utf-8")
    return csv_path, txt_path
