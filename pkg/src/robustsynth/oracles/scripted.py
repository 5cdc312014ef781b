"""Rule-based oracles over ScriptedDesk.

They read the ground-truth variables carried by each observation and the
exact planning model of the task, so every verdict is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..env.actions import Action, Click, Hotkey, Scroll, Terminate, Type, canonical, find_action
from ..env.desk import (Observation, SnapshotRegistry, TaskSpec, default_registry, describe_action,
                        holds, state_hash, widget_enabled)
from ..env.model import INF, DeskModel, desk_model, task_succeeded
from ..env.templates import typo, vocabulary
from ..errors import ContractViolation, PreconditionViolation
from .reflection import detect_reflection, has_reflection, reflect_marker
from .types import (ERROR_TYPES, PROPAGATED, CandidateErrorProposal, ErrorInjectionProfile, HistoryStep,
                    ProgressVerdict, Proposal, RewardVerdict, TrajectoryExperience, require_states)


def _state(obs: Observation) -> Dict:
    require_states([obs])
    return obs.state


class ScriptedPolicy:
    """Plan-following agent with seeded error injection.

    After an unacknowledged mistake the agent keeps acting on the screen it
    *expected* to see, which lets one error propagate over later steps.
    Each step it notices the mistake with probability ``recovery_competence``.
    """

    def __init__(self, task: TaskSpec, profile: Optional[ErrorInjectionProfile] = None,
                 registry: Optional[SnapshotRegistry] = None, policy_id: str = "scripted"):
        self.task = task
        self.registry = registry
        self.model: DeskModel = desk_model(task, registry)
        self.profile = profile or ErrorInjectionProfile()
        self.policy_id = policy_id
        self.vocab = vocabulary(task)

    # -- belief tracking -----------------------------------------------------
    def unacknowledged_error(self, history: Sequence[HistoryStep]) -> Optional[int]:
        last_reflect = -1
        for j, h in enumerate(history):
            if has_reflection(h.output):
                last_reflect = j
        for j in range(last_reflect + 1, len(history)):
            h = history[j]
            if not self.model.useful(_state(h.observation), h.action):
                return j
        return None

    def belief(self, history: Sequence[HistoryStep], j: int) -> Dict:
        s = _state(history[j].observation)
        b = self.model.step(s, self.model.plan_action(s))
        for h in history[j + 1:]:
            b = self.model.step(b, h.action)
        return b

    # -- proposals -------------------------------------------------------------
    def propose(self, u, obs: Observation, history: Sequence[HistoryStep],
                rng: np.random.Generator) -> Proposal:
        s = _state(obs)
        snap = self.model.snapshot
        j = self.unacknowledged_error(history)
        if j is not None:
            if rng.random() < self.profile.recovery_competence:
                a = self._pick_useful(s, rng)
                bad = describe_action(snap, history[j].action)
                thought = reflect_marker(f"step {j + 1} ({bad}) did not do what the task needs",
                                         f"{describe_action(snap, a)} from the current screen")
                return Proposal(thought, a, None, True)
            b = self.belief(history, j)
            a = self.model.plan_action(b) if b.get("status") == "running" else Terminate("success")
            label = None if self.model.useful(s, a) else PROPAGATED
            return Proposal(f"Continuing with the plan: {describe_action(snap, a)}.", a, label)

        step_no = len(history) + 1
        kind = self.profile.forced.get(step_no)
        a_star = self._pick_useful(s, rng)
        if kind is None and self.profile.total_rate > 0:
            draw = rng.random()
            acc = 0.0
            for t in ERROR_TYPES:
                acc += self.profile.rates.get(t, 0.0)
                if draw < acc:
                    kind = t
                    break
        if kind is not None:
            bad, label = self.inject(kind, s, a_star, rng)
            return Proposal(f"Next I will {describe_action(snap, bad)}.", bad, label)
        return Proposal(f"Next I will {describe_action(snap, a_star)}.", a_star)

    def propose_action(self, u, obs, history, rng):
        p = self.propose(u, obs, history, rng)
        return p.thought, p.action

    def _pick_useful(self, s: Mapping, rng: np.random.Generator) -> Action:
        acts = self.model.useful_actions(s)
        if not acts:
            return Terminate("failure")
        return acts[int(rng.integers(len(acts)))]

    # -- error injection -----------------------------------------------------
    def error_candidates(self, kind: str, s: Mapping, a_star: Action) -> List[Action]:
        snap = self.model.snapshot
        enabled = [w for w in snap.widgets if widget_enabled(w, s)]
        model = self.model
        out: List[Action] = []
        if kind == "incorrect_ui_element":
            out = [Click(w.id) for w in enabled if not w.id.startswith(("open_", "apply_"))]
        elif kind == "wrong_target":
            out = [Click(w.id) for w in enabled if w.id.startswith(("open_", "apply_"))]
        elif kind == "grounding_failure":
            base = a_star.widget_id if isinstance(a_star, Click) else (enabled[0].id if enabled else "save")
            out = [Click(base + "~")]
        elif kind == "ineffective_action":
            out = [Click(w.id) for w in snap.widgets if not widget_enabled(w, s)]
        elif kind == "typing_error" and isinstance(a_star, Type):
            out = [Type(typo(a_star.text))]
        elif kind == "incorrect_parameter" and isinstance(a_star, Type):
            field_var = snap.widget(str(s.get("focus", ""))).var if snap.widget(str(s.get("focus", ""))) else None
            out = [Type(v) for v in self.vocab.get(field_var, ()) if v != a_star.text and v != typo(a_star.text)]
        elif kind == "miss_necessary_step" and not isinstance(a_star, Terminate):
            nxt = model.step(s, a_star)
            out = [model.plan_action(nxt)] if nxt.get("status") == "running" else []
        elif kind == "incorrect_tool_usage":
            out = [Hotkey(("ctrl", "shift", "s")), Hotkey(("alt", "f4"))]
        elif kind == "misunderstand_objective":
            out = [Click("ruler")]
        elif kind == "fail_to_terminate" and isinstance(a_star, Terminate):
            out = [Scroll("down", 1), Scroll("up", 1)]
        elif kind == "lack_of_knowledge":
            out = [Scroll("down", 1), Scroll("up", 1), Hotkey(("ctrl", "z"))]
        return [a for a in out if a != a_star and not model.useful(s, a)]

    def inject(self, kind: str, s: Mapping, a_star: Action, rng: np.random.Generator):
        cands = self.error_candidates(kind, s, a_star)
        if not cands:
            kind = "ineffective_action"
            cands = self.error_candidates(kind, s, a_star)
        return cands[int(rng.integers(len(cands)))], kind


class ScriptedJudge:
    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None):
        self.task = task

    def judge_trajectory(self, u, observations: Sequence[Observation],
                         actions: Sequence[Action]) -> RewardVerdict:
        require_states(observations)
        if len(observations) != len(actions) + 1:
            raise ContractViolation("a trajectory has one more observation than actions")
        transitions = []
        for i, a in enumerate(actions):
            before, after = observations[i].state, observations[i + 1].state
            changes = {k: [before.get(k), after.get(k)] for k in sorted(set(before) | set(after))
                       if before.get(k) != after.get(k)}
            transitions.append({"step": i + 1, "action": canonical(a),
                                "from_hash": observations[i].state_hash,
                                "to_hash": observations[i + 1].state_hash, "changes": changes})
        final = observations[-1].state
        flags = [holds(m.predicate, final) for m in self.task.milestones]
        success = task_succeeded(self.task, final)
        status = final.get("status")
        if success:
            why = "all procedures complete and success declared"
        elif all(flags):
            why = f"procedures complete but episode ended with status {status!r}"
        else:
            missing = [m.description for m, f in zip(self.task.milestones, flags) if not f]
            why = "incomplete: " + "; ".join(missing)
        diagnosis = {"milestones": [{"procedure": m.description, "complete": f}
                                    for m, f in zip(self.task.milestones, flags)],
                     "status": status, "success": success, "rationale": why}
        exp = TrajectoryExperience([m.description for m in self.task.milestones], transitions, diagnosis)
        return RewardVerdict(int(success), exp)


class ScriptedProgressCritic:
    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None):
        self.model = desk_model(task, registry)

    def assess_progress(self, u, obs: Observation, action: Action, history=()) -> ProgressVerdict:
        s = _state(obs)
        nxt = self.model.step(s, action)
        if self.model.useful(s, action):
            return ProgressVerdict(1, "advances the task")
        if nxt == s:
            return ProgressVerdict(0, "ineffective")
        if self.model.distance(nxt) >= INF:
            return ProgressVerdict(0, "ends the task before the goal holds")
        return ProgressVerdict(0, "moves away from the goal")


class ScriptedActionCritic:
    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None):
        self.snapshot = (registry or default_registry()).get(task.snapshot_id)
        self.model = desk_model(task, registry)

    def verify_action(self, obs: Observation, action: Action, next_obs: Observation) -> int:
        expected = self.model.step(_state(obs), action)
        return int(state_hash(expected) == next_obs.state_hash)


@dataclass
class PathView:
    """A failed trajectory as handed to the reflector."""

    nodes: List[int]
    observations: List[Observation]
    actions: List[Action]
    reward: Optional[int]
    leaf: Optional[int] = None


class ScriptedReflector:
    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None, k_cand: int = 2):
        self.task = task
        self.model = desk_model(task, registry)
        self.k_cand = k_cand
        self.action_critic = ScriptedActionCritic(task, registry)

    def bad_steps(self, path: PathView) -> List[int]:
        """0-based indices of steps that did not advance or misbehaved."""
        require_states(path.observations)
        out = []
        for i, a in enumerate(path.actions):
            s = path.observations[i].state
            if not self.model.useful(s, a) or not self.action_critic.verify_action(
                    path.observations[i], a, path.observations[i + 1]):
                out.append(i)
        return out

    def propose_error_candidates(self, u, path: PathView,
                                 neighbor_experiences: Sequence[TrajectoryExperience] = ()
                                 ) -> List[CandidateErrorProposal]:
        if path.reward is None or path.reward != 0:
            raise ContractViolation("the reflector only accepts failed trajectories")
        if not path.actions:
            return []
        snap = self.model.snapshot
        bad = self.bad_steps(path)[: self.k_cand]
        fallback = not bad
        if fallback:
            bad = [len(path.actions) - 1]
        d0 = self.model.distance(path.observations[0].state)
        props = []
        for i in bad:
            obs = path.observations[i]
            s = obs.state
            failed = canonical(path.actions[i])
            p = 0.0 if fallback else max(0.0, min(1.0, 1.0 - self.model.distance(s) / (d0 + 1)))
            witness = None
            for exp in neighbor_experiences:
                if not exp.diagnosis.get("success"):
                    continue
                for t in exp.transitions:
                    if t.get("from_hash") == obs.state_hash and t.get("action") != failed:
                        witness = witness or t["action"]
            fix = witness if witness is not None else canonical(self.model.plan_action(s))
            if witness is not None:
                p = p + (1.0 - p) / 2.0
            what = describe_action(snap, path.actions[i])
            guidance = (f"At step {i + 1} the agent tried to {what} ({failed}), which did not move the "
                        f"task forward. Do {fix} instead.")
            props.append(CandidateErrorProposal(path.nodes[i], guidance, p, i + 1, path.leaf))
        return props


class ScriptedRecoveryActor:
    def __init__(self, task: TaskSpec, profile: Optional[ErrorInjectionProfile] = None,
                 registry: Optional[SnapshotRegistry] = None):
        self.model = desk_model(task, registry)
        self.policy = ScriptedPolicy(task, profile, registry, policy_id="recovery")

    def legal(self, s: Mapping, action: Action) -> bool:
        snap = self.model.snapshot
        if isinstance(action, Click):
            w = snap.widget(action.widget_id)
            return w is not None and widget_enabled(w, s)
        if isinstance(action, Type):
            w = snap.widget(str(s.get("focus", "")))
            return w is not None and w.kind == "field" and widget_enabled(w, s)
        if isinstance(action, Hotkey):
            sc = snap.shortcuts.get("+".join(action.keys))
            return sc is not None and holds(sc.get("enabled_when", {}), s)
        return True

    def propose_recovery(self, u, obs: Observation, history: Sequence[HistoryStep], guidance: str,
                         rng: np.random.Generator) -> Proposal:
        if not guidance or not guidance.strip():
            raise PreconditionViolation("recovery needs guidance")
        s = _state(obs)
        g = find_action(guidance)
        a = g if g is not None and self.legal(s, g) else self.model.plan_action(s)
        thought = reflect_marker("the action previously taken from this screen was a mistake",
                                 f"{describe_action(self.model.snapshot, a)} as advised")
        return Proposal(thought, a, None, True)

    def propose_recovery_action(self, u, obs, history, guidance, rng=None):
        p = self.propose_recovery(u, obs, history, guidance, rng if rng is not None else np.random.default_rng(0))
        return p.thought, p.action

    def continue_rollout(self, u, obs, history, rng) -> Proposal:
        return self.policy.propose(u, obs, history, rng)


@dataclass
class OracleSet:
    policy: object
    judge: object
    progress_critic: object
    action_critic: object
    reflection: Callable
    reflector: object
    recovery: object


def scripted_oracles(task: TaskSpec, profile: Optional[ErrorInjectionProfile] = None,
                     recovery_profile: Optional[ErrorInjectionProfile] = None,
                     registry: Optional[SnapshotRegistry] = None, k_cand: int = 2,
                     policy_id: str = "scripted") -> OracleSet:
    return OracleSet(
        policy=ScriptedPolicy(task, profile, registry, policy_id),
        judge=ScriptedJudge(task, registry),
        progress_critic=ScriptedProgressCritic(task, registry),
        action_critic=ScriptedActionCritic(task, registry),
        reflection=detect_reflection,
        reflector=ScriptedReflector(task, registry, k_cand),
        recovery=ScriptedRecoveryActor(task, recovery_profile if recovery_profile is not None else profile,
                                       registry),
    )
