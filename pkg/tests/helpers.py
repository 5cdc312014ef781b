"""Random tree builders and brute-force reference implementations."""

import numpy as np

from robustsynth.env import Click, canonical
from robustsynth.env.desk import Observation
from robustsynth.tree import RolloutStep, TrajectoryTree, insert_rollout


def fake_obs(tag: str) -> Observation:
    return Observation(f"h-{tag}", (), tag)


def random_tree(rng: np.random.Generator, max_nodes: int = 100, max_depth: int = 8,
                n_actions: int = 3, n_obs: int = 3, stale_p: float = 0.0) -> TrajectoryTree:
    """Grow a tree by random rollouts from random nodes.

    Small action and observation alphabets make merges and same-action /
    different-observation siblings common.
    """
    tree = TrajectoryTree("rand", fake_obs("root"))
    target = int(rng.integers(2, max_nodes + 1))
    tries = 0
    while len(tree.nodes) < target and tries < 10 * max_nodes:
        tries += 1
        start = int(rng.integers(len(tree.nodes)))
        room = max_depth - tree.depth(start)
        if room < 1 or tree.nodes[start].stale:
            continue
        n = int(rng.integers(1, min(room, max_nodes - len(tree.nodes) + 1) + 1))
        steps = [RolloutStep(Click(f"w{int(rng.integers(n_actions))}"),
                             fake_obs(f"o{int(rng.integers(n_obs))}"), "out") for _ in range(n)]
        insert_rollout(tree, start, steps, "parallel")
    if stale_p:
        for node in tree.nodes[1:]:
            if rng.random() < stale_p:
                node.stale = True
    return tree


def all_paths(tree: TrajectoryTree):
    """Every root-to-leaf path by explicit DFS: list of (nodes, edges)."""
    out = []

    def dfs(n, nodes, edges):
        kids = tree.nodes[n].children
        if not kids:
            out.append((nodes, edges))
            return
        for e in kids:
            t = tree.edges[e].target
            dfs(t, nodes + [t], edges + [e])

    dfs(0, [0], [])
    return out


def brute_neighbors(tree: TrajectoryTree, failed_leaf: int):
    """Neighbors by scanning all paths: a path is a neighbor when it leaves the
    failed path at a non-root prefix node with a different canonical action,
    and touches no stale node."""
    paths = {nodes[-1]: (nodes, edges) for nodes, edges in all_paths(tree)}
    f_nodes, f_edges = paths[failed_leaf]
    out = set()
    for leaf, (nodes, edges) in paths.items():
        if leaf == failed_leaf or any(tree.nodes[n].stale for n in nodes):
            continue
        j = 0
        while j < min(len(nodes), len(f_nodes)) and nodes[j] == f_nodes[j]:
            j += 1
        # j = number of shared nodes; branching node is o_j (1-based)
        if j < 2 or j > len(f_nodes):
            continue
        mine = canonical(tree.edges[edges[j - 1]].action)
        theirs = canonical(tree.edges[f_edges[j - 1]].action) if j - 1 < len(f_edges) else None
        if mine != theirs:
            out.add(leaf)
    return sorted(out)


def rollout(task, policy, rng, registry=None, episode=0):
    """Drive ``policy`` from the task's initial state until it terminates or runs out of steps."""
    from robustsynth.env import init_env, step
    from robustsynth.oracles import HistoryStep

    handle, obs = init_env(task, registry, episode)
    history, observations, proposals = [], [obs], []
    while not handle.terminated and handle.step_count < task.max_steps:
        p = policy.propose(task, obs, history, rng)
        nxt = step(handle, p.action)
        history.append(HistoryStep(obs, p.output, p.action))
        proposals.append(p)
        observations.append(nxt)
        obs = nxt
    return handle, [h.action for h in history], observations, proposals


# -- UCB selection reference -------------------------------------------------

def mp_bonus(v_node, v_parent, c):
    import mpmath as mp

    with mp.workdps(50):
        return mp.mpf(c) * mp.sqrt(mp.log(mp.mpf(v_parent) + 1) / (mp.mpf(v_node) + 1))


def mp_fragility(r, v_node, v_parent, c):
    import mpmath as mp

    with mp.workdps(50):
        return (1 - mp.mpf(r)) + mp_bonus(v_node, v_parent, c)


def mp_recovery(p, v_node, v_parent, c):
    import mpmath as mp

    with mp.workdps(50):
        return mp.mpf(p) + mp_bonus(v_node, v_parent, c)


def _parent_of(tree, n):
    for e in tree.edges:
        if e.target == n:
            return e.source
    return None


def _argmax_lowest(scored):
    """scored: list of (node_id, mp score); exact ties go to the lowest id."""
    best = max(s for _, s in scored)
    return min(n for n, s in scored if abs(s - best) < 1e-40)


def brute_fragile(tree, verdicts, r_of, c):
    """Most fragile node of the successful subtree by scanning every path, or None."""
    nodes = set()
    for path, _ in all_paths(tree):
        if verdicts[path[-1]] == 1:
            nodes.update(path)
    scored = []
    for n in nodes:
        node = tree.nodes[n]
        if node.stale or not node.children:
            continue
        p = _parent_of(tree, n)
        vp = tree.nodes[n if p is None else p].v_fde
        scored.append((n, mp_fragility(r_of(n), node.v_fde, vp, c)))
    return _argmax_lowest(scored) if scored else None


def brute_recovery(tree, priorities, c):
    scored = []
    for n, pr in priorities.items():
        if tree.nodes[n].stale:
            continue
        p = _parent_of(tree, n)
        vp = tree.nodes[n if p is None else p].v_eir
        scored.append((n, mp_recovery(pr, tree.nodes[n].v_eir, vp, c)))
    return _argmax_lowest(scored) if scored else None


GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def random_selection_case(rng):
    """Random tree with verdicts, visit counts, cached step success on some
    nodes, and recovery priorities on a random node subset.  Values come from
    small grids so ties are frequent."""
    tree = random_tree(rng, max_nodes=100, stale_p=0.05 * float(rng.random() < 0.3))
    verdicts = {leaf: int(rng.integers(2)) for leaf in tree.leaves()}
    step = {}
    for node in tree.nodes:
        node.v_fde = int(rng.integers(0, 6))
        node.v_eir = int(rng.integers(0, 6))
        r = float(GRID[int(rng.integers(len(GRID)))])
        if rng.random() < 0.5:
            node.cached_step_success = r
        else:
            step[node.node_id] = r
    k = int(rng.integers(0, min(12, len(tree.nodes)) + 1))
    chosen = rng.choice(len(tree.nodes), size=k, replace=False)
    priorities = {int(n): float(GRID[int(rng.integers(len(GRID)))]) for n in chosen}
    return tree, verdicts, step, priorities
