"""Explore/recover co-expansion of a trajectory tree.

A task tree is seeded with ``parallel_n`` independent rollouts.  Each round
then runs two arms:

* fragility-driven exploration (FDE) re-enters the successful subtree at the
  node whose actions the progress critic trusts least, plus a UCB bonus;
* experience-informed recovery (EIR) asks the reflector where failed
  trajectories went wrong, picks one candidate node by priority plus a UCB
  bonus, and rolls out the recovery actor from there.

Both arms replay the node's unique action prefix to restore the state.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from ._kernels import ucb_argmax
from .env.actions import Action, Click, Terminate, canonical
from .env.desk import SnapshotRegistry, TaskSpec, replay_prefix, step
from .errors import ConfigurationError, IntegrityError, PreconditionViolation
from .oracles.scripted import OracleSet, PathView
from .oracles.types import ERROR_TYPES, HistoryStep, Proposal, TrajectoryExperience
from .tree import (LeafRecord, RolloutStep, TrajectoryTree, TreePartition, insert_rollout,
                   neighbor_trajectories, path_actions, path_hashes, prune_by_reward, tree_verdicts)

log = logging.getLogger(__name__)

ARM_CODES = {"parallel": 0, "fde": 1, "eir": 2, "step_success": 3}


@dataclass
class CoExpansionConfig:
    parallel_n: int = 4
    rounds: int = 32
    exploration_c: float = 0.25
    step_success_samples: int = 4
    max_steps: int = 30
    base_seed: int = 0
    max_resample: int = 8
    k_cand: int = 2

    def __post_init__(self) -> None:
        if self.parallel_n < 1:
            raise ConfigurationError("parallel_n must be positive")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be non-negative")
        if self.exploration_c < 0:
            raise ConfigurationError("exploration_c must be non-negative")
        if self.step_success_samples < 1 or self.max_steps < 1 or self.max_resample < 1:
            raise ConfigurationError("sample counts and budgets must be positive")

    @classmethod
    def from_dict(cls, d: Optional[Mapping[str, Any]]) -> "CoExpansionConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown co_expansion keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepSuccessEstimate:
    node_id: int
    samples: List[int]
    mean: float


@dataclass
class Candidate:
    node_id: int
    guidance: str
    priority: float
    source_leaf: Optional[int]
    step: int


CandidateSet = Dict[int, Candidate]


# ---------------------------------------------------------------------------
# scores and selectors


def _bonus(v_node: float, v_parent: float, c: float) -> float:
    if v_node < 0 or v_parent < 0 or c < 0:
        raise ValueError("visit counts and c must be non-negative")
    return c * math.sqrt(math.log(v_parent + 1.0) / (v_node + 1.0))


def fragility_score(r_i: float, v_node: float, v_parent: float, c: float) -> float:
    if not 0.0 <= r_i <= 1.0:
        raise ValueError("step success must lie in [0, 1]")
    return (1.0 - r_i) + _bonus(v_node, v_parent, c)


def recovery_score(p_i: float, v_node: float, v_parent: float, c: float) -> float:
    if not 0.0 <= p_i <= 1.0:
        raise ValueError("priority must lie in [0, 1]")
    return p_i + _bonus(v_node, v_parent, c)


def parent_visits(tree: TrajectoryTree, node_id: int, attr: str) -> int:
    parent = tree.parent(node_id)
    # the root has no parent; it is scored against its own count
    return getattr(tree.node(node_id if parent is None else parent), attr)


def fde_candidates(tree: TrajectoryTree, partition: TreePartition) -> List[int]:
    return sorted(n for n in partition.corr_nodes
                  if not tree.nodes[n].stale and not tree.is_leaf(n))


def select_fragile_node(tree: TrajectoryTree, partition: TreePartition, config: CoExpansionConfig,
                        step_success: Optional[Callable[[int], float]] = None) -> Tuple[int, float]:
    """Return the most fragile expandable node of the successful subtree and its score."""
    if not partition.corr_trajectories:
        raise PreconditionViolation("no successful trajectory to explore from")
    cands = fde_candidates(tree, partition)
    if not cands:
        raise PreconditionViolation("successful subtree has no expandable node")
    r = []
    for n in cands:
        val = tree.nodes[n].cached_step_success
        if val is None:
            if step_success is None:
                raise PreconditionViolation(f"node {n} has no step-success estimate")
            val = step_success(n)
        r.append(val)
    base = 1.0 - np.asarray(r, dtype=np.float64)
    vn = [tree.nodes[n].v_fde for n in cands]
    vp = [parent_visits(tree, n, "v_fde") for n in cands]
    i = ucb_argmax(base, vn, vp, config.exploration_c)
    return cands[i], fragility_score(r[i], vn[i], vp[i], config.exploration_c)


def select_recovery_node(candidates: CandidateSet, tree: TrajectoryTree,
                         config: CoExpansionConfig) -> Tuple[int, str, float]:
    ids = sorted(n for n in candidates if not tree.nodes[n].stale)
    if not ids:
        raise PreconditionViolation("no recovery candidate")
    p = [candidates[n].priority for n in ids]
    vn = [tree.nodes[n].v_eir for n in ids]
    vp = [parent_visits(tree, n, "v_eir") for n in ids]
    i = ucb_argmax(p, vn, vp, config.exploration_c)
    return ids[i], candidates[ids[i]].guidance, recovery_score(p[i], vn[i], vp[i], config.exploration_c)


# ---------------------------------------------------------------------------
# oracle plumbing


def node_history(tree: TrajectoryTree, node_id: int) -> List[HistoryStep]:
    return [HistoryStep(tree.observation(tree.edges[e].source), tree.edges[e].agent_output, tree.edges[e].action)
            for e in tree.path_edges(node_id)]


def _propose(agent, task, obs, history, rng) -> Proposal:
    fn = getattr(agent, "propose", None)
    if fn is not None:
        return fn(task, obs, history, rng)
    thought, action = agent.propose_action(task, obs, history, rng)
    return Proposal(thought, action)


def calc_step_success(tree: TrajectoryTree, node_id: int, policy, progress_critic, n: int,
                      rng: np.random.Generator, task=None) -> StepSuccessEstimate:
    node = tree.node(node_id)
    if node.cached_step_success is not None and node.step_samples is not None:
        return StepSuccessEstimate(node_id, list(node.step_samples), node.cached_step_success)
    obs = tree.observation(node_id)
    history = node_history(tree, node_id)
    samples = []
    for _ in range(n):
        p = _propose(policy, task, obs, history, rng)
        samples.append(int(progress_critic.assess_progress(task, obs, p.action, history).c))
    mean = sum(samples) / len(samples)
    node.step_samples = samples
    node.cached_step_success = mean
    return StepSuccessEstimate(node_id, samples, mean)


def leaf_experiences(tree: TrajectoryTree) -> Dict[int, TrajectoryExperience]:
    return {leaf: TrajectoryExperience.from_dict(rec.experience)
            for leaf, rec in tree.leaf_records.items() if rec.experience is not None}


def path_view(tree: TrajectoryTree, leaf: int) -> PathView:
    traj = tree.trajectory(leaf)
    rec = tree.leaf_records.get(leaf)
    return PathView(traj.nodes, [tree.observation(n) for n in traj.nodes], traj.actions,
                    rec.reward if rec else None, leaf)


def localize_errors(tree: TrajectoryTree, partition: TreePartition, reflector, task=None,
                    experiences: Optional[Mapping[int, TrajectoryExperience]] = None) -> CandidateSet:
    if not partition.fail_trajectories:
        raise PreconditionViolation("no failed trajectory to localize")
    experiences = leaf_experiences(tree) if experiences is None else experiences
    merged: CandidateSet = {}
    for leaf in sorted(partition.fail_trajectories):
        traj = tree.trajectory(leaf)
        neigh = []
        for other in neighbor_trajectories(tree, traj):
            if other not in experiences:
                raise IntegrityError(f"trajectory {other} has no stored experience")
            neigh.append(experiences[other])
        view = path_view(tree, leaf)
        view.reward = 0
        for prop in reflector.propose_error_candidates(task, view, neigh):
            if prop.node_id not in traj.nodes:
                raise IntegrityError("reflector proposed a node off the failed path")
            if tree.nodes[prop.node_id].stale:
                continue
            old = merged.get(prop.node_id)
            if old is None or prop.priority > old.priority:
                merged[prop.node_id] = Candidate(prop.node_id, prop.guidance, prop.priority, leaf, prop.step)
    return merged


# ---------------------------------------------------------------------------
# rollouts


def derive_seed(*parts: int) -> int:
    h = hashlib.blake2b(",".join(str(int(p)) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 2


def task_seed(base_seed: int, task_id: str) -> int:
    h = int.from_bytes(hashlib.blake2b(task_id.encode("utf-8"), digest_size=8).digest(), "little")
    return (int(base_seed) & 0xFFFFFFFFFFFFFFFF) ^ h


def _novel_action(oracles: OracleSet, obs, proposal: Proposal, taken: Set[str],
                  rng: np.random.Generator) -> Proposal:
    """Swap ``proposal`` for an action not yet tried from this node."""
    policy = oracles.policy
    kinds = list(ERROR_TYPES)
    rng.shuffle(kinds)
    if hasattr(policy, "error_candidates"):
        a_star = proposal.action
        for kind in kinds:
            for a in policy.error_candidates(kind, obs.state, a_star):
                if canonical(a) not in taken:
                    return Proposal(f"Trying something different: {canonical(a)}.", a, kind)
    i = 0
    while canonical(Click(f"probe~{i}")) in taken:
        i += 1
    return Proposal("Trying something different.", Click(f"probe~{i}"), "grounding_failure")


def run_rollout(task: TaskSpec, tree: TrajectoryTree, start: int, oracles: OracleSet,
                rng: np.random.Generator, episode: int, budget: int,
                guidance: Optional[str] = None, diversify: bool = False,
                registry: Optional[SnapshotRegistry] = None) -> Optional[List[RolloutStep]]:
    """Replay the prefix of ``start`` and continue until termination or budget.

    Returns ``None`` when the replay does not reproduce the stored hashes.
    With ``diversify`` the first step that would retrace an existing edge is
    replaced by an untried action, so the rollout is guaranteed to branch.
    """
    handle, observations = replay_prefix(task, path_actions(tree, start), path_hashes(tree, start),
                                         registry, episode)
    if handle.diverged:
        return None
    obs = observations[-1]
    history = node_history(tree, start)
    steps: List[RolloutStep] = []
    cursor: Optional[int] = start
    limit = min(budget, task.max_steps)
    while not handle.terminated and handle.step_count < limit:
        guided = guidance is not None and not steps
        if guided:
            p = oracles.recovery.propose_recovery(task, obs, history, guidance, rng)
        elif guidance is not None:
            p = oracles.recovery.continue_rollout(task, obs, history, rng)
        else:
            p = _propose(oracles.policy, task, obs, history, rng)
        if diversify and cursor is not None:
            taken = {canonical(tree.edges[e].action) for e in tree.nodes[cursor].children}
            if canonical(p.action) in taken and (not guided or isinstance(p.action, Terminate)):
                p = _novel_action(oracles, obs, p, taken, rng)
                diversify = False
        nobs = step(handle, p.action)
        steps.append(RolloutStep(p.action, nobs, p.output, handle.last_spurious, p.injection))
        history.append(HistoryStep(obs, p.output, p.action))
        if cursor is not None:
            eid = tree._match_child(cursor, canonical(p.action), nobs.state_hash)
            cursor = None if eid is None else tree.edges[eid].target
            if cursor is not None and tree.is_leaf(cursor):
                cursor = None
        obs = nobs
    return steps


def annotate_edges(tree: TrajectoryTree, leaf: int, oracles: OracleSet, task=None) -> None:
    """Cache critic verdicts on every edge of the leaf's path that lacks them."""
    for eid in tree.path_edges(leaf):
        e = tree.edges[eid]
        if e.progress is not None and e.verify is not None:
            continue
        before = tree.observation(e.source)
        after = tree.observation(e.target)
        pv = oracles.progress_critic.assess_progress(task, before, e.action, node_history(tree, e.source))
        e.progress, e.progress_reason = int(pv.c), pv.reason
        e.verify = int(oracles.action_critic.verify_action(before, e.action, after))


def judge_leaf(tree: TrajectoryTree, leaf: int, oracles: OracleSet, task=None):
    traj = tree.trajectory(leaf)
    return oracles.judge.judge_trajectory(task, [tree.observation(n) for n in traj.nodes], traj.actions)


class CoExpansion:
    """Mutable state of one task's run; ``run`` executes it end to end."""

    def __init__(self, task: TaskSpec, config: CoExpansionConfig, oracles: OracleSet,
                 registry: Optional[SnapshotRegistry] = None, seed: Optional[int] = None):
        self.task = task
        self.config = config
        self.oracles = oracles
        self.registry = registry
        self.seed = task_seed(config.base_seed, task.task_id) if seed is None else int(seed)
        _, observations = replay_prefix(task, [], None, registry, 0)
        root_obs = observations[0]
        self.tree = TrajectoryTree(task.task_id, root_obs)
        self.policy_id = getattr(oracles.policy, "policy_id", "policy")

    # -- helpers -------------------------------------------------------------
    def _rng(self, arm: str, round_no: int, idx: int, attempt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, ARM_CODES[arm], round_no + 1, idx, attempt])

    def _episode(self, arm: str, round_no: int, idx: int, attempt: int) -> int:
        return derive_seed(self.seed, ARM_CODES[arm], round_no + 1, idx, attempt)

    def expand(self, arm: str, round_no: int, idx: int, start: int, guidance: Optional[str] = None,
               source_leaf: Optional[int] = None) -> Tuple[str, Optional[int], int]:
        """Roll out from ``start`` until a new leaf appears; returns (outcome, leaf, attempts)."""
        tree = self.tree
        for attempt in range(self.config.max_resample + 1):
            diversify = attempt == self.config.max_resample
            steps = run_rollout(self.task, tree, start, self.oracles, self._rng(arm, round_no, idx, attempt),
                                self._episode(arm, round_no, idx, attempt), self.config.max_steps,
                                guidance, diversify, self.registry)
            if steps is None:
                tree.nodes[start].stale = True
                return "stale", None, attempt + 1
            if not steps:
                return "no_steps", None, attempt + 1
            n_before = len(tree.nodes)
            leaf = insert_rollout(tree, start, steps, arm)
            if len(tree.nodes) == n_before:
                continue  # retraced an existing path; resample
            verdict = judge_leaf(tree, leaf, self.oracles, self.task)
            annotate_edges(tree, leaf, self.oracles, self.task)
            tree.leaf_records[leaf] = LeafRecord(leaf, arm, round_no, self._episode(arm, round_no, idx, attempt),
                                                 start, self.policy_id, source_leaf, int(verdict.r),
                                                 verdict.experience.to_dict())
            return "inserted", leaf, attempt + 1
        return "duplicate", None, self.config.max_resample + 1

    def _log(self, **rec) -> None:
        self.tree.round_log.append(rec)

    # -- phases --------------------------------------------------------------
    def seed_rollouts(self) -> None:
        for idx in range(self.config.parallel_n):
            outcome, leaf, attempts = self.expand("parallel", -1, idx, 0)
            self._log(round=-1, arm="parallel", node=0, score=None, outcome=outcome, leaf=leaf,
                      reward=self._reward(leaf), attempts=attempts)

    def _reward(self, leaf: Optional[int]) -> Optional[int]:
        return None if leaf is None else self.tree.leaf_records[leaf].reward

    def step_success(self, node_id: int) -> float:
        rng = self._rng("step_success", 0, node_id, 0)
        return calc_step_success(self.tree, node_id, self.oracles.policy, self.oracles.progress_critic,
                                 self.config.step_success_samples, rng, self.task).mean

    def fde_round(self, k: int, partition: TreePartition) -> None:
        if not partition.corr_trajectories:
            self._log(round=k, arm="fde", node=None, score=None, outcome="guard", leaf=None, reward=None, attempts=0)
            return
        try:
            node, score = select_fragile_node(self.tree, partition, self.config, self.step_success)
        except PreconditionViolation:
            self._log(round=k, arm="fde", node=None, score=None, outcome="no_candidate", leaf=None,
                      reward=None, attempts=0)
            return
        outcome, leaf, attempts = self.expand("fde", k, 0, node)
        if outcome != "stale":
            self.tree.nodes[node].v_fde += 1
        self._log(round=k, arm="fde", node=node, score=score, outcome=outcome, leaf=leaf,
                  reward=self._reward(leaf), attempts=attempts)

    def eir_round(self, k: int, partition: TreePartition) -> None:
        if not partition.fail_trajectories:
            self._log(round=k, arm="eir", node=None, score=None, outcome="guard", leaf=None, reward=None, attempts=0)
            return
        cands = localize_errors(self.tree, partition, self.oracles.reflector, self.task)
        try:
            node, guidance, score = select_recovery_node(cands, self.tree, self.config)
        except PreconditionViolation:
            self._log(round=k, arm="eir", node=None, score=None, outcome="no_candidate", leaf=None,
                      reward=None, attempts=0)
            return
        src = cands[node].source_leaf
        outcome, leaf, attempts = self.expand("eir", k, 0, node, guidance, src)
        if outcome != "stale":
            self.tree.nodes[node].v_eir += 1
        self._log(round=k, arm="eir", node=node, score=score, outcome=outcome, leaf=leaf,
                  reward=self._reward(leaf), attempts=attempts, source_leaf=src, step=cands[node].step)

    def run(self) -> TrajectoryTree:
        self.seed_rollouts()
        for k in range(self.config.rounds):
            part = prune_by_reward(self.tree, tree_verdicts(self.tree))
            self.fde_round(k, part)
            self.eir_round(k, part)
        return self.tree


def run_co_expansion(task: TaskSpec, config: CoExpansionConfig, oracles: OracleSet,
                     registry: Optional[SnapshotRegistry] = None, seed: Optional[int] = None) -> TrajectoryTree:
    return CoExpansion(task, config, oracles, registry, seed).run()


def branch_counts(tree: TrajectoryTree) -> Dict[str, int]:
    counts = {"parallel": 0, "fde": 0, "eir": 0}
    for rec in tree.leaf_records.values():
        counts[rec.branch_kind] += 1
    return counts
