import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustsynth.env import (Click, Hotkey, Scroll, Terminate, Type, canonical, desk_model, generate_suite,
                             init_env, load_task, make_task, parse, replay_prefix, restore, save, save_task,
                             snapshot_restore, step)
from robustsynth.env.actions import ActionParseError, find_action
from robustsynth.env.desk import SnapshotRegistry, Snapshot, TaskSpec, Milestone, state_hash, Observation
from robustsynth.errors import ConfigurationError, IntegrityError, ProtocolError, TaskSetupError

from conftest import plan_for, tiny_snapshot, tiny_task


def test_init_same_seed_same_root():
    t = make_task("a", 7)
    h1, o1 = init_env(t)
    h2, o2 = init_env(t)
    assert o1.state_hash == o2.state_hash
    assert o1 == o2


def test_empty_setup_is_bare_snapshot(tiny):
    t, reg = tiny
    h, o = init_env(t, reg)
    assert h.state == dict(reg.get(t.snapshot_id).vars)
    assert o.state_hash == state_hash(reg.get(t.snapshot_id).vars)


def test_five_widget_task_lists_exactly_those_widgets(tmp_path, tiny):
    t, reg = tiny
    reg.save_dir(tmp_path / "snapshots")
    save_task(t, tmp_path / "task.json")
    # oracle: read the widget ids back from the stored files
    task_doc = json.loads((tmp_path / "task.json").read_text())
    snap_doc = json.loads((tmp_path / "snapshots" / f"{task_doc['snapshot_id']}.json").read_text())
    expected = [w["id"] for w in snap_doc["widgets"]]
    loaded = SnapshotRegistry.load_dir(tmp_path / "snapshots")
    _, o = init_env(load_task(tmp_path / "task.json"), loaded)
    assert [w[0] for w in o.widgets] == expected
    assert len(o.widgets) == 5


def test_click_disabled_widget_is_noop(tiny):
    t, reg = tiny
    h, o = init_env(t, reg)
    o2 = step(h, Click("back"))  # enabled only inside the panel
    assert o2.state_hash == o.state_hash


def test_unknown_widget_is_noop(task):
    h, o = init_env(task)
    assert step(h, Click("no_such_widget")).state_hash == o.state_hash


def test_step_after_terminate_raises(task):
    h, _ = init_env(task)
    step(h, Terminate("success"))
    with pytest.raises(ProtocolError):
        step(h, Click("save"))


def test_step_budget_enforced(tiny):
    t, reg = tiny
    t = replace(t, max_steps=2)
    h, _ = init_env(t, reg)
    step(h, Click("flag"))
    step(h, Click("flag"))
    with pytest.raises(ProtocolError):
        step(h, Click("flag"))


def test_unknown_snapshot_is_configuration_error(tiny):
    t, _ = tiny
    with pytest.raises(ConfigurationError):
        init_env(t, SnapshotRegistry())


def test_bad_setup_op_is_task_setup_error(tiny):
    t, reg = tiny
    bad = replace(t, setup_ops=[{"op": "set", "var": "nope", "value": 1}])
    with pytest.raises(TaskSetupError):
        init_env(bad, reg)


def test_taskspec_invariants():
    with pytest.raises(ConfigurationError):
        TaskSpec("x", "u", "s", [], [], {})
    with pytest.raises(ConfigurationError):
        TaskSpec("x", "u", "s", [], [Milestone("m", {"a": 1})], {"a": 2})
    with pytest.raises(ConfigurationError):
        TaskSpec("x", "u", "s", [], [Milestone("m", {"a": 1})], {"a": 1}, max_steps=0)


def test_two_runs_identical_sequences(long_task):
    acts = plan_for(long_task)
    _, a = replay_prefix(long_task, acts)
    _, b = replay_prefix(long_task, acts)
    assert [o.state_hash for o in a] == [o.state_hash for o in b]


def test_save_restore_then_step_matches(long_task):
    acts = plan_for(long_task)
    h, _ = init_env(long_task)
    step(h, acts[0])
    h2 = snapshot_restore(h)
    assert step(h2, acts[1]).state_hash == step(h, acts[1]).state_hash


def test_save_midway_and_resume_matches_uninterrupted():
    t = make_task("mid", 5, n_milestones=2, stochasticity=0.3)
    acts = plan_for(replace(t, stochasticity=0.0))[:6]
    h, _ = init_env(t, episode=9)
    for a in acts[:3]:
        step(h, a)
    blob = save(h)
    for a in acts[3:]:
        last = step(h, a)
    h2 = restore(blob)
    for a in acts[3:]:
        last2 = step(h2, a)
    assert last.state_hash == last2.state_hash
    assert h.spurious_steps == h2.spurious_steps


def test_flipped_byte_blob_is_integrity_error(task):
    h, _ = init_env(task)
    blob = bytearray(save(h))
    for i in (len(blob) // 3, len(blob) // 2, len(blob) - 5):
        bad = bytearray(blob)
        bad[i] ^= 0x01
        with pytest.raises(IntegrityError):
            restore(bytes(bad))


def test_empty_prefix_single_observation(task):
    h, obs = replay_prefix(task, [])
    assert len(obs) == 1 and h.step_count == 0
    assert obs[0] == init_env(task)[1]


def test_ten_step_prefix_identical_over_100_replays(long_task):
    acts = plan_for(long_task)[:10]
    assert len(acts) == 10
    ref = [o.state_hash for o in replay_prefix(long_task, acts)[1]]
    for _ in range(100):
        assert [o.state_hash for o in replay_prefix(long_task, acts)[1]] == ref


def test_divergence_rate_matches_per_step_model(long_task):
    # per-step spurious probability p; a 10-step replay diverges iff any step is spurious
    acts = plan_for(long_task)[:10]
    expected = [o.state_hash for o in replay_prefix(long_task, acts)[1]]
    noisy = replace(long_task, stochasticity=0.5)
    n, flagged, spurious_steps = 1000, 0, 0
    for ep in range(n):
        h, _ = replay_prefix(noisy, acts, expected, None, ep)
        flagged += h.diverged
        spurious_steps += len(h.spurious_steps)
    p_div = 1 - 0.5 ** 10
    sd = np.sqrt(p_div * (1 - p_div) / n)
    assert abs(flagged / n - p_div) <= 4 * sd + 1e-3
    # roughly half of all replayed steps take the spurious transition
    assert abs(spurious_steps / (10 * n) - 0.5) <= 4 * np.sqrt(0.25 / (10 * n))


def test_spurious_rate_single_step(long_task):
    a = plan_for(long_task)[0]
    noisy = replace(long_task, stochasticity=0.2)
    hits = sum(replay_prefix(noisy, [a], None, None, ep)[0].last_spurious for ep in range(2000))
    assert abs(hits / 2000 - 0.2) <= 4 * np.sqrt(0.16 / 2000)


def test_terminate_is_never_spurious(task):
    noisy = replace(task, stochasticity=1.0)
    h, _ = init_env(noisy)
    step(h, Terminate("failure"))
    assert not h.last_spurious and h.terminated


def test_plan_solves_every_generated_task():
    from robustsynth.env import task_succeeded

    for t in generate_suite(20, 1):
        h, _ = replay_prefix(t, plan_for(t))
        assert task_succeeded(t, h.state), t.task_id


def test_observation_state_must_match_hash(task):
    o = init_env(task)[1]
    d = o.to_dict()
    assert Observation.from_dict(d) == o
    d["state"]["saved"] = not d["state"]["saved"]
    with pytest.raises(IntegrityError):
        Observation.from_dict(d)


def test_snapshot_file_must_match_id(tmp_path):
    snap = tiny_snapshot()
    d = snap.to_dict()
    d["vars"]["flag"] = True
    (tmp_path / f"{snap.snapshot_id}.json").write_text(json.dumps(d))
    with pytest.raises(IntegrityError):
        SnapshotRegistry.load_dir(tmp_path)


def test_task_round_trip(tmp_path, long_task):
    save_task(long_task, tmp_path / "t.json")
    assert load_task(tmp_path / "t.json") == long_task


# -- actions -----------------------------------------------------------------

actions = st.one_of(
    st.builds(Click, st.from_regex(r"[A-Za-z0-9_]{1,12}", fullmatch=True)),
    st.builds(Type, st.text(max_size=20)),
    st.builds(Hotkey, st.lists(st.from_regex(r"[a-z0-9]{1,5}", fullmatch=True), min_size=1, max_size=3)
              .map(tuple)),
    st.builds(Scroll, st.sampled_from(["up", "down"]), st.integers(0, 50)),
    st.builds(Terminate, st.sampled_from(["success", "failure"])),
)


@given(actions)
def test_canonical_round_trip(a):
    assert parse(canonical(a)) == a


@given(actions)
def test_find_action_in_free_text(a):
    assert find_action(f"I think we should do {canonical(a)} now.") == a


@pytest.mark.parametrize("text", ["CLICK()", "SCROLL(down,07)", "TERMINATE(maybe)", "click(a)", "TYPE(3)"])
def test_parse_rejects_noncanonical(text):
    with pytest.raises(ActionParseError):
        parse(text)


# -- snapshot soundness on random continuations ------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 8), st.lists(st.integers(0, 10_000), min_size=1, max_size=12))
def test_restore_is_identity_on_continuations(seed, cut, picks):
    t = make_task("hyp", seed, stochasticity=0.25)
    cands = desk_model(replace(t, stochasticity=0.0)).candidates
    acts = [cands[p % len(cands)] for p in picks]
    acts = [a for a in acts if not isinstance(a, Terminate)]
    cut = min(cut, len(acts))
    h, _ = init_env(t, episode=seed)
    for a in acts[:cut]:
        step(h, a)
    h2 = restore(save(h))
    for a in acts[cut:]:
        assert step(h, a).state_hash == step(h2, a).state_hash
