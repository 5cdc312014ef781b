import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from helpers import rollout
from robustsynth.coexpand import CoExpansionConfig, run_co_expansion
from robustsynth.dataset.minhash import MinHasher, exact_jaccard
from robustsynth.dataset.pipeline import (DatasetSplit, MixtureConfig, PipelineConfig, StepView, TrainingInstance,
                                          TrajectoryView, build_instances, dedup, manifest_path, mask_steps, mix,
                                          parse_jsonl, posterior_filter, run_pipeline, serialize,
                                          split_reflection, trajectories_from_tree)
from robustsynth.env import Scroll, init_env, make_task, step
from robustsynth.errors import MixtureInfeasible
from robustsynth.oracles import detect_reflection
from robustsynth.oracles.scripted import (ScriptedActionCritic, ScriptedPolicy, ScriptedProgressCritic,
                                          scripted_oracles)
from robustsynth.oracles.types import ErrorInjectionProfile

NOISY = ErrorInjectionProfile.uniform(0.3)


def view_of(task, actions, observations, proposals, tid=0, spurious=None, reward=None):
    spurious = spurious or [False] * len(actions)
    steps = [StepView(i + 1, i, observations[i], observations[i + 1], a, p.output, "parallel", spurious[i],
                      p.injection) for i, (a, p) in enumerate(zip(actions, proposals))]
    return TrajectoryView(task.task_id, task.instruction, tid, "p", "parallel", reward, steps)


def critics(task):
    return ScriptedProgressCritic(task), ScriptedActionCritic(task)


def fake_instance(i, task="t", reflection=False, target=None):
    return TrainingInstance("do it", [], f"h{i}", target or f"THOUGHT: step {i}\nACTION: click(w{i})", reflection,
                            {"task_id": task, "trajectory_id": i, "step": 1, "policy_id": "p",
                             "branch_kind": "parallel", "history_image_cap": 5})


@pytest.fixture(scope="module")
def grown():
    task = make_task("d-grown", 21)
    tree = run_co_expansion(task, CoExpansionConfig(parallel_n=4, rounds=6), scripted_oracles(task, NOISY))
    return task, tree


# -- posterior filter --------------------------------------------------------

def test_deterministic_corpus_loses_nothing(grown):
    task, tree = grown
    views = trajectories_from_tree(tree, task.instruction)
    assert posterior_filter(views) == views


def test_one_flagged_step_drops_the_trajectory(task):
    _, acts, obs, props = rollout(task, ScriptedPolicy(task), np.random.default_rng(0))
    flags = [False] * len(acts)
    flags[1] = True
    views = [view_of(task, acts, obs, props, 0), view_of(task, acts, obs, props, 1, flags)]
    assert [v.trajectory_id for v in posterior_filter(views)] == [0]


def test_retention_follows_per_step_noise():
    task = make_task("noisy", 1, stochasticity=0.2)
    n, kept = 1000, 0
    for ep in range(n):
        handle, obs0 = init_env(task, episode=ep)
        flags, observations = [], [obs0]
        for _ in range(10):
            observations.append(step(handle, Scroll("down", 1)))
            flags.append(handle.last_spurious)
        kept += not any(flags)
    lo, hi = stats.binomtest(kept, n).proportion_ci(0.99)
    assert lo <= 0.8 ** 10 <= hi


# -- masking -----------------------------------------------------------------

def test_oracle_plan_keeps_every_step(task):
    _, acts, obs, props = rollout(task, ScriptedPolicy(task, ErrorInjectionProfile()), np.random.default_rng(0))
    view = view_of(task, acts, obs, props)
    assert mask_steps(view, *critics(task), task) == [s.step for s in view.steps]


def test_planted_wrong_widget_at_step_3_is_removed_with_its_fallout(task):
    # the policy keeps following its plan, so steps that depended on the
    # wrong click are logged as propagated and must go too
    policy = ScriptedPolicy(task, ErrorInjectionProfile(forced={3: "grounding_failure"}))
    _, acts, obs, props = rollout(task, policy, np.random.default_rng(0))
    view = view_of(task, acts, obs, props)
    assert props[2].injection == "grounding_failure"
    removed = set(s.step for s in view.steps) - set(mask_steps(view, *critics(task), task))
    assert min(removed) == 3
    assert removed == {s.step for s in view.steps if s.injection}
    assert {s.injection for s in view.steps if s.step > 3 and s.injection} <= {"propagated"}


def test_failed_trajectory_keeps_its_correct_prefix(task):
    # stop right after the error: reward 0, yet steps 1-2 are fine
    policy = ScriptedPolicy(task, ErrorInjectionProfile(forced={3: "grounding_failure"}))
    _, acts, obs, props = rollout(task, policy, np.random.default_rng(0))
    view = view_of(task, acts[:3], obs[:4], props[:3], reward=0)
    assert mask_steps(view, *critics(task), task) == [1, 2]


def test_masking_matches_injection_logs():
    tp = fp = fn = 0
    for s in range(30):
        task = make_task(f"m-{s}", s)
        _, acts, obs, props = rollout(task, ScriptedPolicy(task, NOISY), np.random.default_rng(s))
        view = view_of(task, acts, obs, props)
        removed = {st.step for st in view.steps} - set(mask_steps(view, *critics(task), task))
        planted = {st.step for st in view.steps if st.injection}
        tp, fp, fn = tp + len(removed & planted), fp + len(removed - planted), fn + len(planted - removed)
    assert tp > 0 and fp == 0 and fn == 0


def test_cached_verdicts_are_used(task):
    _, acts, obs, props = rollout(task, ScriptedPolicy(task), np.random.default_rng(0))
    view = view_of(task, acts, obs, props)
    for s in view.steps:
        s.progress, s.verify = 1, 1
    view.steps[0].verify = 0
    assert mask_steps(view) == [s.step for s in view.steps[1:]]


# -- instances and split -----------------------------------------------------

def all_steps(views):
    return {v.trajectory_id: [s.step for s in v.steps] for v in views}


def test_shared_edges_become_one_instance(grown):
    task, tree = grown
    views = trajectories_from_tree(tree, task.instruction)
    insts = build_instances(views, all_steps(views))
    assert len(insts) == len(tree.edges)
    assert len({i.instance_id for i in insts}) == len(insts)


def test_split_without_markers_is_all_agnostic(task):
    _, acts, obs, props = rollout(task, ScriptedPolicy(task, NOISY), np.random.default_rng(1))
    view = view_of(task, acts, obs, props)
    split = split_reflection(build_instances([view], all_steps([view])), detect_reflection)
    assert split.ref == [] and len(split.agn) == len(acts)


def test_reflection_routing_matches_recovery_first_steps(grown):
    task, tree = grown
    first = set()
    for rec in tree.leaf_records.values():
        if rec.branch_kind != "eir":
            continue
        path = tree.path_edges(rec.leaf)
        e = next(e for e in path if tree.edges[e].source == rec.start_node)
        if tree.edges[e].branch_kind == "eir":
            first.add(e)
    assert first
    views = trajectories_from_tree(tree, task.instruction)
    insts = build_instances(views, all_steps(views))
    split = split_reflection(insts, detect_reflection)
    edge_of = {(v.trajectory_id, s.step): s.edge_id for v in views for s in v.steps}
    ref_edges = {edge_of[(i.provenance["trajectory_id"], i.provenance["step"])] for i in split.ref}
    assert ref_edges == first
    assert len(split.agn) + len(split.ref) == len(insts)


# -- dedup -------------------------------------------------------------------

def test_dedup_identical_and_disjoint():
    same = [fake_instance(0, target="THOUGHT: open the menu\nACTION: click(menu)"),
            fake_instance(1, target="THOUGHT: open the menu\nACTION: click(menu)")]
    assert len(dedup(same)) == 1
    far = [fake_instance(0, target=" ".join(f"a{i}" for i in range(50))),
           fake_instance(1, target=" ".join(f"b{i}" for i in range(50)))]
    assert len(dedup(far)) == 2


def test_dedup_is_per_task():
    t = "THOUGHT: open the menu\nACTION: click(menu)"
    assert len(dedup([fake_instance(0, "a", target=t), fake_instance(1, "b", target=t)])) == 2


def test_dedup_rejects_bad_parameters():
    for kw in ({"n": 0}, {"k": 8}, {"threshold": 0.0}, {"threshold": 1.5}):
        with pytest.raises(ValueError):
            dedup([], **kw)


def test_sketch_error_shrinks_with_k():
    rng = np.random.default_rng(3)
    vocab = [f"w{i}" for i in range(200)]
    base = list(rng.choice(vocab, size=600))
    docs = []
    for rate in np.linspace(0.02, 0.5, 40):
        toks = list(base)
        for j in np.flatnonzero(rng.random(len(toks)) < rate):
            toks[j] = str(rng.choice(vocab))
        docs.append(" ".join(toks))
    exact = [exact_jaccard(docs[0], d) for d in docs[1:]]
    errs = []
    for k in (32, 128, 512):
        sigs = MinHasher(k=k).signatures(docs)
        errs.append(np.mean([abs(MinHasher.similarity(sigs[0], s) - e) for s, e in zip(sigs[1:], exact)]))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 0.05


# -- mixture -----------------------------------------------------------------

def big_split(n_agn, n_ref):
    return DatasetSplit([fake_instance(i) for i in range(n_agn)],
                        [fake_instance(i, reflection=True) for i in range(n_ref)])


def test_mixture_counts_are_exact():
    out = mix(big_split(95_000, 12_000), MixtureConfig(0.1, 100_000))
    assert len(out) == 100_000
    assert sum(i.reflection for i in out) == 10_000


@pytest.mark.parametrize("lam,total", [(0.0, 50), (0.25, 10), (0.15, 10), (0.333, 7), (1.0, 5)])
def test_reflection_share_is_rounded_half_up(lam, total):
    out = mix(big_split(60, 60), MixtureConfig(lam, total))
    assert sum(i.reflection for i in out) == int(np.floor(lam * total + 0.5))
    assert len(out) == total


def test_mixture_infeasible():
    with pytest.raises(MixtureInfeasible):
        mix(big_split(100, 3), MixtureConfig(1.0, 10))
    with pytest.raises(MixtureInfeasible):
        mix(big_split(5, 100), MixtureConfig(0.1, 100))


def test_mixture_is_seeded():
    split = big_split(200, 50)
    a = [i.instance_id for i in mix(split, MixtureConfig(0.2, 100, seed=1))]
    assert a == [i.instance_id for i in mix(split, MixtureConfig(0.2, 100, seed=1))]
    assert a != [i.instance_id for i in mix(split, MixtureConfig(0.2, 100, seed=2))]


# -- serialization -----------------------------------------------------------

def test_empty_serialization(tmp_path):
    out = tmp_path / "empty.jsonl"
    assert serialize([], out) == 0
    assert out.read_text() == ""
    assert json.loads(manifest_path(out).read_text())["records"] == 0


def test_round_trip(tmp_path):
    insts = [fake_instance(i, reflection=i % 2 == 0) for i in range(5)]
    insts[1].history = [("h0", "THOUGHT: a\nACTION: click(x)")]
    serialize(insts, tmp_path / "d.jsonl")
    assert parse_jsonl(tmp_path / "d.jsonl") == insts


def test_only_the_target_is_trainable(grown, tmp_path):
    task, tree = grown
    res = run_pipeline(trajectories_from_tree(tree, task.instruction), detect_reflection, PipelineConfig())
    serialize(res.split.agn + res.split.ref, tmp_path / "d.jsonl")
    for line in (tmp_path / "d.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["loss_mask"] == "target"
        assert rec["target"].startswith("THOUGHT: ") and "\nACTION: " in rec["target"]
        assert all(set(h) == {"observation", "output"} for h in rec["history"])


def test_pipeline_is_byte_deterministic(grown, tmp_path):
    task, tree = grown
    paths = []
    for run in range(2):
        res = run_pipeline(trajectories_from_tree(tree, task.instruction), detect_reflection, PipelineConfig())
        p = tmp_path / f"run{run}.jsonl"
        serialize(res.split.agn + res.split.ref, p, {"stages": res.stages})
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert manifest_path(paths[0]).read_bytes() == manifest_path(paths[1]).read_bytes()


def test_pipeline_stage_counts(grown):
    task, tree = grown
    res = run_pipeline(trajectories_from_tree(tree, task.instruction), detect_reflection,
                       replace(PipelineConfig(), balance=False))
    st = res.stages
    assert st["trajectories"] == st["trajectories_kept"] == len(tree.leaves())
    assert st["agn_raw"] + st["ref_raw"] == st["instances"]
    assert st["agn_dedup"] <= st["agn_raw"] and st["ref_dedup"] <= st["ref_raw"]
    assert st["ref_raw"] > 0
