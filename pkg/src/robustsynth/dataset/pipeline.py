"""From judged trees to a reflection-aware training mixture.

Stages, in order: posterior filter (drop trajectories with an unreliable
transition), step masking (keep steps both critics accept), instance
building (one instance per distinct tree edge), reflection split, per-task
balancing and near-duplicate removal, and seeded mixing.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..env.actions import Action, canonical
from ..env.desk import Observation
from ..errors import MixtureInfeasible
from ..oracles.types import output_thought
from ..tree import TrajectoryTree
from .minhash import MinHasher, greedy_representatives

log = logging.getLogger(__name__)

PIPELINE_VERSION = "1"
HISTORY_IMAGE_CAP = 5
SYSTEM_PROMPT = ("You operate a desktop application for the user. At each step read the instruction, "
                 "the previous steps and the current screen, then answer with one THOUGHT line and one "
                 "ACTION line written in the canonical action grammar.")


@dataclass
class StepView:
    step: int  # 1-based
    edge_id: int
    observation: Observation
    next_observation: Observation
    action: Action
    output: str
    branch_kind: str
    spurious: bool = False
    injection: Optional[str] = None
    progress: Optional[int] = None
    progress_reason: Optional[str] = None
    verify: Optional[int] = None


@dataclass
class TrajectoryView:
    task_id: str
    instruction: str
    trajectory_id: int
    policy_id: str
    branch_kind: str
    reward: Optional[int]
    steps: List[StepView]
    stale: bool = False

    @property
    def diverged(self) -> bool:
        return self.stale or any(s.spurious for s in self.steps)


def trajectories_from_tree(tree: TrajectoryTree, instruction: str) -> List[TrajectoryView]:
    out = []
    for leaf in tree.leaves():
        rec = tree.leaf_records.get(leaf)
        traj = tree.trajectory(leaf)
        steps = []
        for i, eid in enumerate(traj.edges):
            e = tree.edges[eid]
            steps.append(StepView(i + 1, eid, tree.observation(e.source), tree.observation(e.target), e.action,
                                  e.agent_output, e.branch_kind, e.spurious, e.injection, e.progress,
                                  e.progress_reason, e.verify))
        out.append(TrajectoryView(tree.task_id, instruction, leaf, rec.policy_id if rec else "",
                                  rec.branch_kind if rec else "", rec.reward if rec else None, steps,
                                  any(tree.nodes[n].stale for n in traj.nodes)))
    return out


def posterior_filter(trajectories: Sequence[TrajectoryView]) -> List[TrajectoryView]:
    kept = [t for t in trajectories if not t.diverged]
    per_task: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
    for t in trajectories:
        per_task[t.task_id][1] += 1
    for t in kept:
        per_task[t.task_id][0] += 1
    for task_id in sorted(per_task):
        k, n = per_task[task_id]
        log.info("posterior filter %s: kept %d/%d", task_id, k, n)
    return kept


def mask_steps(trajectory: TrajectoryView, progress_critic=None, action_critic=None, task=None) -> List[int]:
    """Step numbers whose progress and action verdicts are both 1.

    Verdicts cached on the steps are reused; missing ones are computed.
    """
    kept = []
    history: List = []
    for s in trajectory.steps:
        c = s.progress
        if c is None:
            from ..oracles.types import HistoryStep

            c = progress_critic.assess_progress(task, s.observation, s.action, history).c
            history = history + [HistoryStep(s.observation, s.output, s.action)]
        v = s.verify
        if v is None:
            v = action_critic.verify_action(s.observation, s.action, s.next_observation)
        if c == 1 and v == 1:
            kept.append(s.step)
    return kept


@dataclass
class TrainingInstance:
    instruction: str
    history: List[Tuple[str, str]]  # (observation ref, agent output)
    observation: str
    target: str
    reflection: bool
    provenance: Dict[str, Any]

    @property
    def key(self) -> Tuple[str, int, int]:
        p = self.provenance
        return (p["task_id"], p["trajectory_id"], p["step"])

    @property
    def instance_id(self) -> str:
        return "{}:{}:{}".format(*self.key)


def canonical_target(output: str, action: Action, reason: Optional[str]) -> str:
    """Rewrite a raw step output into the fixed training layout."""
    thought = " ".join(output_thought(output).split())
    if reason:
        thought = f"{thought} (check: {reason})"
    return f"THOUGHT: {thought}\nACTION: {canonical(action)}"


def build_instances(trajectories: Sequence[TrajectoryView], kept_steps: Mapping[int, Sequence[int]]
                    ) -> List[TrainingInstance]:
    """One instance per kept edge; an edge shared by several trajectories is
    attributed to the first of them in (task, trajectory) order."""
    seen = set()
    out = []
    for t in sorted(trajectories, key=lambda t: (t.task_id, t.trajectory_id)):
        keep = set(kept_steps.get(t.trajectory_id, ()))
        for s in t.steps:
            if s.step not in keep or (t.task_id, s.edge_id) in seen:
                continue
            seen.add((t.task_id, s.edge_id))
            history = [(p.observation.state_hash, p.output) for p in t.steps[: s.step - 1]]
            out.append(TrainingInstance(
                t.instruction, history, s.observation.state_hash,
                canonical_target(s.output, s.action, s.progress_reason), False,
                {"task_id": t.task_id, "policy_id": t.policy_id, "branch_kind": s.branch_kind,
                 "trajectory_id": t.trajectory_id, "step": s.step, "history_image_cap": HISTORY_IMAGE_CAP}))
    return out


@dataclass
class DatasetSplit:
    agn: List[TrainingInstance] = field(default_factory=list)
    ref: List[TrainingInstance] = field(default_factory=list)


def split_reflection(instances: Sequence[TrainingInstance], reflection_identifier: Callable) -> DatasetSplit:
    split = DatasetSplit()
    for inst in instances:
        flag = bool(reflection_identifier(inst.instruction, inst.history, inst.target))
        inst.reflection = flag
        (split.ref if flag else split.agn).append(inst)
    return split


def _task_rng(seed: int, task_id: str) -> np.random.Generator:
    import hashlib

    h = int.from_bytes(hashlib.blake2b(task_id.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, h])


def median_cap(instances: Sequence[TrainingInstance]) -> Optional[int]:
    counts: Dict[str, int] = defaultdict(int)
    for inst in instances:
        counts[inst.provenance["task_id"]] += 1
    if not counts:
        return None
    return max(1, int(statistics.median(counts.values())))


def balance_tasks(instances: Sequence[TrainingInstance], cap: Optional[int], seed: int = 0
                  ) -> List[TrainingInstance]:
    """Keep at most ``cap`` instances per task, sampled with a per-task seed."""
    if cap is None:
        return list(instances)
    groups: Dict[str, List[int]] = defaultdict(list)
    for i, inst in enumerate(instances):
        groups[inst.provenance["task_id"]].append(i)
    keep = set()
    for task_id, idx in groups.items():
        if len(idx) <= cap:
            keep.update(idx)
        else:
            pick = _task_rng(seed, task_id).choice(len(idx), size=cap, replace=False)
            keep.update(idx[int(j)] for j in pick)
    return [inst for i, inst in enumerate(instances) if i in keep]


def dedup(instances: Sequence[TrainingInstance], n: int = 3, k: int = 128, threshold: float = 0.85,
          task_cap: Optional[int] = None, seed: int = 0) -> List[TrainingInstance]:
    """Greedy near-duplicate removal on target text, run separately per task."""
    if n < 1 or k < 16 or not 0.0 < threshold <= 1.0:
        raise ValueError("need n >= 1, k >= 16 and threshold in (0, 1]")
    pool = balance_tasks(instances, task_cap, seed)
    hasher = MinHasher(n, k, seed)
    groups: Dict[str, List[int]] = defaultdict(list)
    for i, inst in enumerate(pool):
        groups[inst.provenance["task_id"]].append(i)
    keep = set()
    for task_id in sorted(groups):
        idx = groups[task_id]
        sigs = hasher.signatures(pool[i].target for i in idx)
        assign = greedy_representatives(sigs, threshold)
        keep.update(idx[j] for j in range(len(idx)) if assign[j] == j)
    return [inst for i, inst in enumerate(pool) if i in keep]


@dataclass
class MixtureConfig:
    lambda_ref: float = 0.1
    total: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_ref <= 1.0:
            raise ValueError("lambda_ref must lie in [0, 1]")
        if self.total < 1:
            raise ValueError("total must be positive")

    @property
    def n_ref(self) -> int:
        # half-up rounding, independent of float banker's rounding
        return int(np.floor(self.lambda_ref * self.total + 0.5))


def mix(split: DatasetSplit, cfg: MixtureConfig) -> List[TrainingInstance]:
    n_ref = cfg.n_ref
    n_agn = cfg.total - n_ref
    if n_ref > len(split.ref):
        raise MixtureInfeasible("ref", n_ref, len(split.ref))
    if n_agn > len(split.agn):
        raise MixtureInfeasible("agn", n_agn, len(split.agn))
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, 0x313])
    ref_idx = np.sort(rng.choice(len(split.ref), size=n_ref, replace=False)) if n_ref else []
    agn_idx = np.sort(rng.choice(len(split.agn), size=n_agn, replace=False)) if n_agn else []
    chosen = [split.ref[int(i)] for i in ref_idx] + [split.agn[int(i)] for i in agn_idx]
    order = rng.permutation(len(chosen))
    return [chosen[int(i)] for i in order]


# ---------------------------------------------------------------------------
# serialization


def instance_record(inst: TrainingInstance) -> dict:
    return {
        "id": inst.instance_id,
        "system": SYSTEM_PROMPT,
        "instruction": inst.instruction,
        "history": [{"observation": o, "output": out} for o, out in inst.history],
        "observation": inst.observation,
        "target": inst.target,
        "loss_mask": "target",
        "reflection": inst.reflection,
        "provenance": dict(inst.provenance),
    }


def record_instance(rec: Mapping[str, Any]) -> TrainingInstance:
    return TrainingInstance(rec["instruction"], [(h["observation"], h["output"]) for h in rec["history"]],
                            rec["observation"], rec["target"], bool(rec["reflection"]), dict(rec["provenance"]))


def serialize(instances: Sequence[TrainingInstance], out_path: Path,
              manifest: Optional[Mapping[str, Any]] = None) -> int:
    """Write one JSON record per line plus ``<stem>.manifest.json``."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".partial")
    man_path = manifest_path(out_path)
    try:
        with tmp.open("w", encoding="utf-8") as fh:
            for inst in instances:
                fh.write(json.dumps(instance_record(inst), ensure_ascii=False) + "\n")
        man = {"format": "robustsynth.dataset", "pipeline_version": PIPELINE_VERSION,
               "records": len(instances),
               "reflection_records": sum(1 for i in instances if i.reflection)}
        man.update(manifest or {})
        man_tmp = man_path.with_name(man_path.name + ".partial")
        man_tmp.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, out_path)
        os.replace(man_tmp, man_path)
    except OSError:
        for p in (tmp, man_path.with_name(man_path.name + ".partial")):
            if p.exists():
                p.unlink()
        raise
    return len(instances)


def manifest_path(out_path: Path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.stem + ".manifest.json")


def parse_jsonl(path: Path) -> List[TrainingInstance]:
    with Path(path).open(encoding="utf-8") as fh:
        return [record_instance(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# whole pipeline


@dataclass
class PipelineConfig:
    n: int = 3
    k: int = 128
    threshold: float = 0.85
    balance: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Optional[Mapping[str, Any]]) -> "PipelineConfig":
        from ..errors import ConfigurationError

        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PipelineResult:
    split: DatasetSplit
    stages: Dict[str, int]
    retention: Dict[str, List[int]]


def run_pipeline(trajectories: Sequence[TrajectoryView], reflection_identifier: Callable,
                 cfg: PipelineConfig, progress_critic=None, action_critic=None) -> PipelineResult:
    kept = posterior_filter(trajectories)
    retention: Dict[str, List[int]] = {}
    for t in trajectories:
        retention.setdefault(t.task_id, [0, 0])[1] += 1
    for t in kept:
        retention[t.task_id][0] += 1
    # trajectory ids are leaf ids, unique only within a task
    instances: List[TrainingInstance] = []
    by_task: Dict[str, List[TrajectoryView]] = defaultdict(list)
    for t in kept:
        by_task[t.task_id].append(t)
    steps_kept = 0
    for task_id in sorted(by_task):
        masks = {t.trajectory_id: mask_steps(t, progress_critic, action_critic) for t in by_task[task_id]}
        steps_kept += sum(len(v) for v in masks.values())
        instances += build_instances(by_task[task_id], masks)
    split = split_reflection(instances, reflection_identifier)
    stages = {"trajectories": len(trajectories), "trajectories_kept": len(kept),
              "steps_total": sum(len(t.steps) for t in kept),
              "steps_kept": steps_kept,
              "instances": len(instances), "agn_raw": len(split.agn), "ref_raw": len(split.ref)}
    out = DatasetSplit()
    for name in ("agn", "ref"):
        pool = getattr(split, name)
        cap = median_cap(pool) if cfg.balance else None
        reps = dedup(pool, cfg.n, cfg.k, cfg.threshold, cap, cfg.seed)
        setattr(out, name, reps)
        stages[f"{name}_cap"] = cap if cap is not None else -1
        stages[f"{name}_dedup"] = len(reps)
    return PipelineResult(out, stages, retention)
