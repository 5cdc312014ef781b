"""Batch driver: synthesis across tasks, dataset builds, robustness runs, reports.

Every worker owns one task end to end and writes only that task's paths;
the coordinator alone writes run manifests.  Per-task outputs depend only
on (task, per-task seed, config), so the worker count never changes bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .coexpand import branch_counts, run_co_expansion, task_seed
from .config import RunConfig
from .dataset.pipeline import MixtureConfig, mix, run_pipeline, serialize, trajectories_from_tree
from .env.actions import canonical
from .env.desk import SnapshotRegistry, TaskSpec, save_task
from .env.templates import builtin_snapshots, generate_suite
from .errors import CaseRejected, ConfigurationError, IntegrityError, NotFound
from .oracles.reflection import detect_reflection
from .oracles.scripted import OracleSet, scripted_oracles
from .robust_eval import (EVAL_BUDGET, RunRecord, aggregate, build_test_cases, load_cases, report_csv,
                          report_summary, run_suite, save_case)
from .store import Store, file_digest, write_jsonl, write_text_atomic
from .tree import TrajectoryTree, read_tree, write_tree

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2

SYNTH_FIELDS = ("policy", "task_id", "leaves", "successes", "pass_at_m", "average")


def _digest(*parts: Any, size: int = 6) -> str:
    return hashlib.blake2b(json.dumps(parts, sort_keys=True).encode("utf-8"), digest_size=size).hexdigest()


@dataclass
class RunOutcome:
    run_id: str
    exit_code: int
    record: Dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# tasks


def init_tasks(cfg: RunConfig, count: Optional[int] = None, seed: Optional[int] = None) -> List[str]:
    """Write generated task specs and the built-in snapshots into the store."""
    store = Store(cfg.store).ensure()
    SnapshotRegistry(builtin_snapshots()).save_dir(store.snapshots_dir)
    t = cfg.tasks
    tasks = generate_suite(t.count if count is None else count, t.seed if seed is None else seed,
                           t.stochasticity, t.max_steps, t.prefix)
    for task in tasks:
        save_task(task, store.tasks_dir / f"{task.task_id}.json")
    return [task.task_id for task in tasks]


def build_oracles(task: TaskSpec, cfg: RunConfig, registry: Optional[SnapshotRegistry] = None) -> OracleSet:
    oracles = scripted_oracles(task, cfg.oracles.policy, cfg.oracles.recovery_policy, registry,
                               cfg.co_expansion.k_cand)
    if cfg.oracles.mode == "remote":
        from .oracles.remote import (RemoteActionCritic, RemoteClient, RemoteConfig, RemoteJudge,
                                     RemoteProgressCritic, RemoteReflection)

        def client(role):
            return RemoteClient(RemoteConfig.from_mapping(cfg.oracles.remote, role))

        oracles = replace(oracles, judge=RemoteJudge(client("reward")),
                          progress_critic=RemoteProgressCritic(client("progress")),
                          action_critic=RemoteActionCritic(client("action")),
                          reflection=RemoteReflection(client("reflection")))
    return oracles


# ---------------------------------------------------------------------------
# synthesis


def trajectory_records(tree: TrajectoryTree) -> List[dict]:
    out = []
    for leaf in tree.leaves():
        rec = tree.leaf_records.get(leaf)
        traj = tree.trajectory(leaf)
        out.append({
            "trajectory_id": leaf,
            "task_id": tree.task_id,
            "branch_kind": rec.branch_kind if rec else None,
            "round": rec.round if rec else None,
            "policy_id": rec.policy_id if rec else None,
            "source_leaf": rec.source_leaf if rec else None,
            "reward": rec.reward if rec else None,
            "actions": [canonical(a) for a in traj.actions],
            "hashes": [tree.nodes[n].observation_ref for n in traj.nodes],
            "injections": [tree.edges[e].injection for e in traj.edges],
            "spurious": any(tree.edges[e].spurious for e in traj.edges),
            "terminal_status": traj.terminal_status,
        })
    return out


def tree_summary(tree: TrajectoryTree) -> Dict[str, Any]:
    leaves = tree.leaves()
    rewards = [tree.leaf_records[l].reward if l in tree.leaf_records else 0 for l in leaves]
    yields = {"parallel": 0, "fde": 0, "eir": 0}
    for l in leaves:
        rec = tree.leaf_records.get(l)
        if rec is not None and rec.reward:
            yields[rec.branch_kind] += 1
    policies = sorted({tree.leaf_records[l].policy_id for l in leaves if l in tree.leaf_records})
    return {"leaves": len(leaves), "successes": int(sum(rewards)), "nodes": len(tree.nodes),
            "stale_nodes": sum(1 for n in tree.nodes if n.stale), "branch_counts": branch_counts(tree),
            "yields": yields, "policies": policies}


def synthesize_task(root: str, task_id: str, cfg: RunConfig) -> Dict[str, Any]:
    """One task end to end.  Returns a summary; raises only on store corruption."""
    store = Store(Path(root))
    key = cfg.synthesis_key()
    try:
        task = store.load_task(task_id)
        marker = store.read_marker(task_id)
        if marker and marker.get("synthesis_key") == key and marker.get("task") == task.fingerprint():
            store.check_marker(task_id)
            return {"task_id": task_id, "status": "skipped", **marker["summary"]}
        registry = store.registry()
        oracles = build_oracles(task, cfg, registry)
        tree = run_co_expansion(task, cfg.co_expansion, oracles, registry)
        store.marker_path(task_id).unlink(missing_ok=True)
        tree.store.flush(store.observations_dir)
        write_jsonl(store.rounds_path(task_id), tree.round_log)
        write_jsonl(store.trajectories_path(task_id), trajectory_records(tree))
        write_tree(tree, store.tree_path(task_id))
        summary = tree_summary(tree)
        store.write_marker(task_id, {"task_id": task_id, "synthesis_key": key, "task": task.fingerprint(),
                                     "seed": task_seed(cfg.base_seed, task_id),
                                     "tree_sha256": file_digest(store.tree_path(task_id)), "summary": summary})
        return {"task_id": task_id, "status": "ok", **summary}
    except IntegrityError:
        raise
    except Exception as exc:  # isolate the failure to this task
        log.exception("task %s failed", task_id)
        return {"task_id": task_id, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def run_synthesis(cfg: RunConfig, pattern: Optional[str] = None, workers: Optional[int] = None,
                  seed: Optional[int] = None) -> RunOutcome:
    if seed is not None:
        cfg = replace(cfg, base_seed=int(seed), co_expansion=replace(cfg.co_expansion, base_seed=int(seed)))
    workers = cfg.workers if workers is None else int(workers)
    if workers < 1:
        raise ConfigurationError("worker budget must be >= 1")
    store = Store(cfg.store).ensure()
    task_ids = [p.stem for p in store.task_paths(pattern or cfg.tasks_glob)]
    run_id = "synth-" + _digest(cfg.synthesis_key(), task_ids)
    t0 = time.time()
    results: Dict[str, Dict[str, Any]] = {}
    if workers == 1 or len(task_ids) <= 1:
        for tid in task_ids:
            results[tid] = synthesize_task(str(store.root), tid, cfg)
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(task_ids))) as pool:
            futs = {tid: pool.submit(synthesize_task, str(store.root), tid, cfg) for tid in task_ids}
            for tid, fut in futs.items():
                results[tid] = fut.result()
    tasks = [results[t] for t in task_ids]
    totals = {"tasks": len(tasks), "ok": sum(t["status"] == "ok" for t in tasks),
              "skipped": sum(t["status"] == "skipped" for t in tasks),
              "failed": sum(t["status"] == "failed" for t in tasks),
              "leaves": sum(t.get("leaves", 0) for t in tasks),
              "successes": sum(t.get("successes", 0) for t in tasks)}
    for kind in ("parallel", "fde", "eir"):
        totals[f"{kind}_leaves"] = sum(t.get("branch_counts", {}).get(kind, 0) for t in tasks)
        totals[f"{kind}_successes"] = sum(t.get("yields", {}).get(kind, 0) for t in tasks)
    record = {"kind": "synthesis", "run_id": run_id, "synthesis_key": cfg.synthesis_key(),
              "workers": workers, "base_seed": cfg.base_seed, "task_ids": task_ids, "tasks": tasks,
              "totals": totals, "wall_time_s": round(time.time() - t0, 3), "config": cfg.to_dict()}
    store.append_manifest(run_id, record)
    return RunOutcome(run_id, EXIT_PARTIAL if totals["failed"] else EXIT_OK, record)


def load_finished_tree(store: Store, task_id: str) -> TrajectoryTree:
    store.check_marker(task_id)
    return read_tree(store.tree_path(task_id), store.observations_dir)


# ---------------------------------------------------------------------------
# dataset


class _MissingVerdict:
    """Stands in for a critic when every verdict should already be cached."""

    def assess_progress(self, *a, **k):
        raise IntegrityError("tree edge lacks a cached progress verdict")

    def verify_action(self, *a, **k):
        raise IntegrityError("tree edge lacks a cached action verdict")


def run_dataset(cfg: RunConfig, lambda_ref: Optional[float] = None, total: Optional[int] = None,
                name: Optional[str] = None) -> RunOutcome:
    store = Store(cfg.store).ensure()
    lambda_ref = cfg.dataset.lambda_ref if lambda_ref is None else float(lambda_ref)
    total = cfg.dataset.total if total is None else int(total)
    name = name or cfg.dataset.name
    task_ids = store.finished_tasks()
    trajectories = []
    sources = {}
    for tid in task_ids:
        task = store.load_task(tid)
        tree = load_finished_tree(store, tid)
        sources[tid] = store.read_marker(tid)["tree_sha256"]
        trajectories += trajectories_from_tree(tree, task.instruction)
    critic = _MissingVerdict()
    res = run_pipeline(trajectories, detect_reflection, cfg.pipeline, critic, critic)
    if total is None:
        instances = list(res.split.agn) + list(res.split.ref)
        mixture = {"lambda_ref": None, "total": len(instances), "n_ref": len(res.split.ref),
                   "n_agn": len(res.split.agn)}
    else:
        mc = MixtureConfig(lambda_ref, total, cfg.dataset.seed)
        instances = mix(res.split, mc)
        mixture = {"lambda_ref": lambda_ref, "total": total, "n_ref": mc.n_ref, "n_agn": total - mc.n_ref}
    run_id = "dataset-" + _digest(sources, asdict(cfg.pipeline), mixture, cfg.dataset.seed, name)
    out = store.datasets_dir / run_id / f"{name}.jsonl"
    manifest = {"run_id": run_id, "tasks": task_ids, "source_trees": sources, "stages": res.stages,
                "retention": res.retention, "mixture": mixture, "pipeline": asdict(cfg.pipeline),
                "mixture_seed": cfg.dataset.seed}
    serialize(instances, out, manifest)
    record = {"kind": "dataset", "run_id": run_id, "output": str(out.relative_to(store.root)),
              "records": len(instances), "stages": res.stages, "mixture": mixture, "tasks": task_ids}
    store.append_manifest(run_id, record)
    return RunOutcome(run_id, EXIT_OK, record)


# ---------------------------------------------------------------------------
# robustness evaluation


def build_cases(cfg: RunConfig, overwrite: bool = True) -> Dict[str, int]:
    """Test cases from every failed, non-diverged trajectory of every finished tree."""
    store = Store(cfg.store).ensure()
    registry = store.registry()
    if overwrite:
        for p in store.cases_dir.glob("*.json"):
            p.unlink()
    stats = {"trajectories": 0, "rejected": 0, "cases": 0}
    for tid in store.finished_tasks():
        task = store.load_task(tid)
        tree = load_finished_tree(store, tid)
        for leaf in tree.leaves():
            rec = tree.leaf_records.get(leaf)
            traj = tree.trajectory(leaf)
            if rec is None or rec.reward or any(tree.nodes[n].stale for n in traj.nodes) \
                    or any(tree.edges[e].spurious for e in traj.edges):
                continue
            stats["trajectories"] += 1
            try:
                cases = build_test_cases(task, traj.actions, [tree.observation(n) for n in traj.nodes],
                                         [tree.edges[e].injection for e in traj.edges], cfg.eval.depths,
                                         f"{tid}-{leaf}", registry, EVAL_BUDGET)
            except CaseRejected as exc:
                log.debug("%s leaf %d rejected: %s", tid, leaf, exc)
                stats["rejected"] += 1
                continue
            for c in cases:
                save_case(c, store.cases_dir)
            stats["cases"] += len(cases)
    return stats


def _suite_chunk(agent: str, cases, runs: int, seed: int, registry, options):
    return run_suite(agent, cases, runs, seed, registry, options)


def eval_records_path(store: Store, run_id: str) -> Path:
    return store.run_dir(run_id) / "records.jsonl"


def write_eval_report(store: Store, run_id: str, records: Sequence[RunRecord], runs: int) -> List[Path]:
    report = aggregate(records, runs)
    csv_path = store.reports_dir / f"{run_id}.csv"
    txt_path = store.reports_dir / f"{run_id}.summary.txt"
    write_text_atomic(csv_path, report_csv(report))
    write_text_atomic(txt_path, report_summary(report))
    return [csv_path, txt_path]


def run_eval(cfg: RunConfig, agent: Optional[str] = None, runs: Optional[int] = None,
             workers: Optional[int] = None) -> RunOutcome:
    store = Store(cfg.store).ensure()
    agent = agent or cfg.eval.agent
    runs = cfg.eval.runs if runs is None else int(runs)
    if runs < 1:
        raise ConfigurationError("runs must be >= 1")
    workers = cfg.workers if workers is None else int(workers)
    if not any(store.cases_dir.glob("*.json")):
        log.info("no case files; building them from finished trees")
        build_cases(cfg)
    cases = [c for c in load_cases(store.cases_dir) if c.depth in cfg.eval.depths]
    registry = store.registry()
    options = dict(cfg.eval.agent_options)
    if workers == 1 or len(cases) <= 1:
        records, invalid = run_suite(agent, cases, runs, cfg.eval.seed, registry, options)
    else:
        chunks = [cases[i::workers] for i in range(workers)]
        records, invalid = [], []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for recs, inv in pool.map(_suite_chunk, [agent] * workers, chunks, [runs] * workers,
                                      [cfg.eval.seed] * workers, [registry] * workers, [options] * workers):
                records += recs
                invalid += inv
        records.sort(key=lambda r: (r.case_id, r.run))
        invalid.sort()
    run_id = "eval-" + "".join(ch if ch.isalnum() else "_" for ch in agent)[:40] + "-" + _digest(
        [c.case_id for c in cases], [c.expected_hashes[-1] for c in cases], runs, cfg.eval.seed, options)
    store.run_dir(run_id).mkdir(parents=True, exist_ok=True)
    write_jsonl(eval_records_path(store, run_id), [asdict(r) for r in records])
    paths = write_eval_report(store, run_id, records, runs) if records else []
    rep = aggregate(records, runs) if records else None
    record = {"kind": "eval", "run_id": run_id, "agent": agent, "runs_per_case": runs,
              "cases": len(cases), "invalid_cases": invalid,
              "depth_success": {a: {str(d): v for d, v in ds.items()} for a, ds in rep.depth_success.items()}
              if rep else {},
              "drop_percent": rep.drop_percent if rep else {},
              "reports": [str(p.relative_to(store.root)) for p in paths]}
    store.append_manifest(run_id, record)
    return RunOutcome(run_id, EXIT_PARTIAL if invalid else EXIT_OK, record)


# ---------------------------------------------------------------------------
# reports


def synthesis_rows(store: Store, task_ids: Sequence[str]) -> List[dict]:
    rows = []
    for tid in task_ids:
        if store.read_marker(tid) is None:
            continue
        tree = load_finished_tree(store, tid)
        by_policy: Dict[str, List[int]] = {}
        for leaf in tree.leaves():
            rec = tree.leaf_records.get(leaf)
            by_policy.setdefault(rec.policy_id if rec else "", []).append(rec.reward if rec else 0)
        for policy in sorted(by_policy):
            rw = by_policy[policy]
            rows.append({"policy": policy, "task_id": tid, "leaves": len(rw), "successes": int(sum(rw)),
                         "pass_at_m": int(any(rw)), "average": sum(rw) / len(rw)})
    return rows


def synthesis_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SYNTH_FIELDS)
    for r in rows:
        w.writerow([r["policy"], r["task_id"], r["leaves"], r["successes"], r["pass_at_m"], f"{r['average']:.4f}"])
    return buf.getvalue()


def synthesis_summary(rows: Sequence[dict], failed: Sequence[str] = ()) -> str:
    lines = ["Success over the trajectory tree (Pass@M: any leaf succeeds; Average: successful leaves / M)", ""]
    head = "policy".ljust(18) + "tasks".rjust(7) + "Pass@M".rjust(10) + "Average".rjust(10)
    lines += [head, "-" * len(head)]
    for policy in sorted({r["policy"] for r in rows}):
        rs = [r for r in rows if r["policy"] == policy]
        pass_m = 100 * sum(r["pass_at_m"] for r in rs) / len(rs)
        avg = 100 * sum(r["average"] for r in rs) / len(rs)
        lines.append(policy.ljust(18) + f"{len(rs):7d}" + f"{pass_m:9.1f}%" + f"{avg:9.1f}%")
    if failed:
        lines += ["", "failed tasks: " + ", ".join(failed)]
    return "\n".join(lines) + "\n"


def emit_report(store: Store, run_id: str) -> List[Path]:
    """Regenerate the report documents for ``run_id``; output bytes are deterministic."""
    rec = store.manifests(run_id)[-1]
    kind = rec.get("kind")
    store.reports_dir.mkdir(parents=True, exist_ok=True)
    if kind == "synthesis":
        failed = [t["task_id"] for t in rec["tasks"] if t["status"] == "failed"]
        ok = [t for t in rec["task_ids"] if t not in failed]
        rows = synthesis_rows(store, ok)
        csv_path = store.reports_dir / f"{run_id}.csv"
        txt_path = store.reports_dir / f"{run_id}.summary.txt"
        write_text_atomic(csv_path, synthesis_csv(rows))
        write_text_atomic(txt_path, synthesis_summary(rows, failed))
        return [csv_path, txt_path]
    if kind == "eval":
        path = eval_records_path(store, run_id)
        if not path.exists():
            raise NotFound(f"records for run {run_id} are missing")
        records = [RunRecord(**json.loads(l)) for l in path.read_text(encoding="utf-8").splitlines() if l]
        if not records:
            csv_path = store.reports_dir / f"{run_id}.csv"
            from .robust_eval import CSV_FIELDS

            write_text_atomic(csv_path, ",".join(CSV_FIELDS) + "\n")
            return [csv_path]
        return write_eval_report(store, run_id, records, rec["runs_per_case"])
    if kind == "dataset":
        out = store.root / rec["output"]
        man = out.with_name(out.stem + ".manifest.json")
        if not man.exists():
            raise NotFound(f"dataset manifest {man} is missing")
        body = json.loads(man.read_text(encoding="utf-8"))
        if body.get("run_id") != run_id:
            raise IntegrityError(f"dataset manifest {man} belongs to run {body.get('run_id')}")
        path = store.reports_dir / f"{run_id}.dataset.json"
        write_text_atomic(path, json.dumps(body, indent=2, sort_keys=True) + "\n")
        return [path]
    raise IntegrityError(f"run {run_id} has unknown kind {kind!r}")
