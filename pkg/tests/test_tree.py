import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustsynth.env import Click, Terminate, canonical
from robustsynth.errors import ExpansionRefused, IncompleteJudgment, IntegrityError
from robustsynth.tree import (LeafRecord, ObservationStore, RolloutStep, TrajectoryTree, enumerate_trajectories,
                              insert_rollout, neighbor_branches, neighbor_trajectories, path_actions,
                              path_hashes, prune_by_reward, read_tree, write_tree)

from helpers import all_paths, brute_neighbors, fake_obs, random_tree


def steps(*pairs):
    return [RolloutStep(Click(a), fake_obs(o), f"do {a}") for a, o in pairs]


def fresh():
    return TrajectoryTree("t", fake_obs("root"))


def test_insert_three_steps_under_root():
    tree = fresh()
    leaf = insert_rollout(tree, 0, steps(("a", "1"), ("b", "2"), ("c", "3")), "parallel")
    assert (len(tree.nodes), len(tree.edges), leaf) == (4, 3, 3)
    tree.check_shape()


def test_duplicate_first_step_reuses_edge():
    tree = fresh()
    insert_rollout(tree, 0, steps(("a", "1"), ("b", "2")), "parallel")
    before = len(tree.nodes)
    new = steps(("a", "1"), ("x", "5"), ("y", "6"))
    insert_rollout(tree, 0, new, "fde")
    assert len(tree.nodes) == before + len(new) - 1
    assert len(tree.nodes[0].children) == 1


def test_merge_only_leading_steps():
    tree = fresh()
    insert_rollout(tree, 0, steps(("a", "1"), ("b", "2")), "parallel")
    # second step repeats ("b","2") but under a fresh node, so it is not merged
    insert_rollout(tree, 0, steps(("z", "9"), ("b", "2")), "parallel")
    assert len(tree.nodes) == 5


def test_same_action_different_observation_is_new_child():
    tree = fresh()
    insert_rollout(tree, 0, steps(("a", "1")), "parallel")
    insert_rollout(tree, 0, steps(("a", "2")), "parallel")
    assert len(tree.nodes[0].children) == 2


def test_insert_under_stale_refused():
    tree = fresh()
    insert_rollout(tree, 0, steps(("a", "1")), "parallel")
    tree.nodes[1].stale = True
    with pytest.raises(ExpansionRefused):
        insert_rollout(tree, 1, steps(("b", "2")), "fde")


def test_insert_rejects_empty_and_bad_kind():
    with pytest.raises(ValueError):
        insert_rollout(fresh(), 0, [], "parallel")
    with pytest.raises(ValueError):
        insert_rollout(fresh(), 0, steps(("a", "1")), "other")


def test_single_path_one_trajectory():
    tree = fresh()
    insert_rollout(tree, 0, steps(("a", "1"), ("b", "2")), "parallel")
    assert len(enumerate_trajectories(tree)) == 1


def full_binary(depth):
    tree = fresh()
    frontier = [0]
    for d in range(depth):
        nxt = []
        for n in frontier:
            for side in "LR":
                nxt.append(insert_rollout(tree, n, steps((side, f"{n}{side}")), "parallel"))
        frontier = nxt
    return tree


def test_full_binary_depth3_has_8_trajectories():
    assert len(enumerate_trajectories(full_binary(3))) == 8


@pytest.mark.parametrize("seed", range(20))
def test_enumeration_matches_dfs(seed):
    tree = random_tree(np.random.default_rng(seed), max_nodes=50)
    got = sorted((t.nodes, t.edges) for t in enumerate_trajectories(tree))
    assert got == sorted(all_paths(tree))
    for t in enumerate_trajectories(tree):
        assert len(t.actions) == len(t.nodes) - 1


def test_prune_all_success():
    tree = full_binary(2)
    part = prune_by_reward(tree, {l: 1 for l in tree.leaves()})
    assert not part.fail_trajectories and not part.fail_nodes
    assert part.corr_nodes == set(range(len(tree.nodes)))


def test_prune_two_leaves_shared_prefix():
    tree = fresh()
    a = insert_rollout(tree, 0, steps(("a", "1"), ("b", "2")), "parallel")
    b = insert_rollout(tree, 0, steps(("a", "1"), ("c", "3")), "parallel")
    part = prune_by_reward(tree, {a: 1, b: 0})
    assert {0, 1} <= part.corr_nodes and {0, 1} <= part.fail_nodes


def test_prune_missing_verdict():
    tree = full_binary(1)
    with pytest.raises(IncompleteJudgment):
        prune_by_reward(tree, {tree.leaves()[0]: 1})


@pytest.mark.parametrize("seed", range(20))
def test_prune_matches_path_scan(seed):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng)
    verdicts = {l: int(rng.integers(2)) for l in tree.leaves()}
    part = prune_by_reward(tree, verdicts)
    corr, fail = set(), set()
    for nodes, _ in all_paths(tree):
        (corr if verdicts[nodes[-1]] else fail).update(nodes)
    assert part.corr_nodes == corr and part.fail_nodes == fail
    assert part.corr_trajectories | part.fail_trajectories == set(tree.leaves())


def test_neighbor_branches_only_failed_edge():
    tree = fresh()
    leaf = insert_rollout(tree, 0, steps(("a", "1"), ("b", "2")), "parallel")
    assert neighbor_branches(tree, tree.trajectory(leaf), 2) == []


def test_neighbor_branches_three_children():
    tree = fresh()
    leaf = insert_rollout(tree, 0, steps(("a", "1"), ("b", "2")), "parallel")
    insert_rollout(tree, 1, steps(("c", "3")), "fde")
    insert_rollout(tree, 1, steps(("d", "4")), "fde")
    got = neighbor_branches(tree, tree.trajectory(leaf), 2)
    assert sorted(canonical(e.action) for e in got) == ["CLICK(c)", "CLICK(d)"]


def test_neighbor_branches_index_range():
    tree = fresh()
    leaf = insert_rollout(tree, 0, steps(("a", "1"), ("b", "2")), "parallel")
    traj = tree.trajectory(leaf)
    for bad in (0, 1, len(traj.nodes) + 1):
        with pytest.raises(IndexError):
            neighbor_branches(tree, traj, bad)


@pytest.mark.parametrize("seed", range(20))
def test_neighbor_branches_match_filter(seed):
    tree = random_tree(np.random.default_rng(seed))
    for leaf in tree.leaves():
        traj = tree.trajectory(leaf)
        for i in range(2, len(traj.nodes) + 1):
            node = traj.nodes[i - 1]
            taken = canonical(traj.actions[i - 1]) if i - 1 < len(traj.actions) else None
            want = [e for e in tree.nodes[node].children if canonical(tree.edges[e].action) != taken]
            assert [e.edge_id for e in neighbor_branches(tree, traj, i)] == want


def test_neighbors_single_path_empty():
    tree = fresh()
    leaf = insert_rollout(tree, 0, steps(("a", "1"), ("b", "2"), ("c", "3")), "parallel")
    assert neighbor_trajectories(tree, tree.trajectory(leaf)) == []


def test_neighbors_of_sibling_subtree_below_root():
    # the failed path and a sibling B leave a shared first node; B's subtree has 3 leaves
    tree = fresh()
    failed = insert_rollout(tree, 0, steps(("s", "0"), ("a", "1"), ("x", "2")), "parallel")
    b = insert_rollout(tree, 1, steps(("b", "3")), "parallel")
    for tag in "pqr":
        insert_rollout(tree, b, steps((tag, tag)), "parallel")
    assert len(neighbor_trajectories(tree, tree.trajectory(failed))) == 3


def test_branches_at_the_root_are_not_neighbors():
    # the union starts at the second path node, so root siblings are excluded
    tree = fresh()
    failed = insert_rollout(tree, 0, steps(("a", "1"), ("x", "2")), "parallel")
    b = insert_rollout(tree, 0, steps(("b", "3")), "parallel")
    for tag in "pqr":
        insert_rollout(tree, b, steps((tag, tag)), "parallel")
    assert neighbor_trajectories(tree, tree.trajectory(failed)) == []
    assert brute_neighbors(tree, failed) == []


def test_neighbors_skip_stale():
    tree = fresh()
    failed = insert_rollout(tree, 0, steps(("s", "0"), ("a", "1")), "parallel")
    other = insert_rollout(tree, 1, steps(("b", "2")), "parallel")
    tree.nodes[other].stale = True
    assert neighbor_trajectories(tree, tree.trajectory(failed)) == []


@pytest.mark.parametrize("seed", range(10))
def test_neighbors_match_brute_force(seed):
    rng = np.random.default_rng(1000 + seed)
    tree = random_tree(rng, stale_p=0.05)
    for leaf in tree.leaves():
        assert neighbor_trajectories(tree, tree.trajectory(leaf)) == brute_neighbors(tree, leaf)


def test_path_actions():
    tree = fresh()
    leaf = insert_rollout(tree, 0, steps(("a", "1"), ("b", "2"), ("c", "3"), ("d", "4")), "parallel")
    assert path_actions(tree, 0) == []
    assert [canonical(a) for a in path_actions(tree, leaf)] == ["CLICK(a)", "CLICK(b)", "CLICK(c)", "CLICK(d)"]
    assert path_hashes(tree, leaf) == ["h-root", "h-1", "h-2", "h-3", "h-4"]
    with pytest.raises(IndexError):
        path_actions(tree, 99)


# -- persistence ---------------------------------------------------------------


def test_tree_file_round_trip(tmp_path):
    tree = random_tree(np.random.default_rng(4))
    for l in tree.leaves():
        tree.leaf_records[l] = LeafRecord(l, "parallel", -1, 7, 0, "p", None, 1, {"procedures": []})
    tree.nodes[2].v_fde = 3
    tree.nodes[1].cached_step_success = 0.75
    tree.nodes[1].step_samples = [1, 1, 0, 1]
    write_tree(tree, tmp_path / "t.jsonl")
    tree.store.flush(tmp_path / "obs")
    back = read_tree(tmp_path / "t.jsonl", tmp_path / "obs")
    assert back.nodes == tree.nodes and back.edges == tree.edges
    assert back.leaf_records == tree.leaf_records
    assert back.observation(3) == tree.observation(3)
    write_tree(back, tmp_path / "u.jsonl")
    assert (tmp_path / "t.jsonl").read_bytes() == (tmp_path / "u.jsonl").read_bytes()


def test_truncated_tree_file(tmp_path):
    tree = random_tree(np.random.default_rng(5))
    write_tree(tree, tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    (tmp_path / "t.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(IntegrityError):
        read_tree(tmp_path / "t.jsonl")


def test_tree_file_header_checked(tmp_path):
    (tmp_path / "t.jsonl").write_text(json.dumps({"type": "node"}) + "\n")
    with pytest.raises(IntegrityError):
        read_tree(tmp_path / "t.jsonl")
    (tmp_path / "t.jsonl").write_text(json.dumps({"type": "header", "format": "robustsynth.tree",
                                                  "version": 99}) + "\n")
    with pytest.raises(IntegrityError):
        read_tree(tmp_path / "t.jsonl")


def test_observation_store_missing_and_corrupt(tmp_path):
    store = ObservationStore()
    with pytest.raises(IntegrityError):
        store.get("nope")
    with pytest.raises(IntegrityError):
        store.load(tmp_path, ["h-x"])
    (tmp_path / "h-x.json").write_text(json.dumps(fake_obs("y").to_dict()))
    with pytest.raises(IntegrityError):
        store.load(tmp_path, ["h-x"])


def test_observations_stored_once():
    tree = fresh()
    insert_rollout(tree, 0, steps(("a", "1"), ("b", "1"), ("c", "1")), "parallel")
    assert len(tree.store) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tree_shape_invariants(seed):
    tree = random_tree(np.random.default_rng(seed))
    tree.check_shape()
    assert len(tree.leaves()) == len(all_paths(tree))
    for n in tree.nodes[1:]:
        assert tree.edges[n.parent_edge].target == n.node_id
