"""Replayable trajectory tree: nodes are observations, edges are actions."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .env.actions import Action, Terminate, canonical, parse
from .env.desk import Observation, canonical_json
from .errors import ExpansionRefused, IncompleteJudgment, IntegrityError

FORMAT = "robustsynth.tree"
FORMAT_VERSION = 1
BRANCH_KINDS = ("parallel", "fde", "eir")


@dataclass
class TreeNode:
    node_id: int
    observation_ref: str
    parent_edge: Optional[int] = None
    children: List[int] = field(default_factory=list)
    v_fde: int = 0
    v_eir: int = 0
    cached_step_success: Optional[float] = None
    stale: bool = False
    step_samples: Optional[List[int]] = None


@dataclass
class TreeEdge:
    edge_id: int
    action: Action
    source: int
    target: int
    branch_kind: str
    agent_output: str
    spurious: bool = False
    injection: Optional[str] = None
    # critic verdicts cached at insertion time
    progress: Optional[int] = None
    progress_reason: Optional[str] = None
    verify: Optional[int] = None


@dataclass
class RolloutStep:
    """One executed step as produced by a rollout, before insertion."""

    action: Action
    observation: Observation  # observation *after* the action
    agent_output: str
    spurious: bool = False
    injection: Optional[str] = None


@dataclass
class LeafRecord:
    """Provenance and judgement of the rollout that created a leaf."""

    leaf: int
    branch_kind: str
    round: int
    episode: int
    start_node: int
    policy_id: str = ""
    source_leaf: Optional[int] = None
    reward: Optional[int] = None
    experience: Optional[dict] = None


@dataclass
class Trajectory:
    trajectory_id: int  # the leaf node id
    nodes: List[int]
    edges: List[int]
    actions: List[Action]
    terminal_status: Optional[str]

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class TreePartition:
    corr_trajectories: Set[int]
    fail_trajectories: Set[int]
    corr_nodes: Set[int]
    fail_nodes: Set[int]


class ObservationStore:
    """Content-addressed observation payloads shared by all nodes."""

    def __init__(self) -> None:
        self._obs: Dict[str, Observation] = {}

    def put(self, obs: Observation) -> str:
        self._obs.setdefault(obs.state_hash, obs)
        return obs.state_hash

    def get(self, ref: str) -> Observation:
        try:
            return self._obs[ref]
        except KeyError:
            raise IntegrityError(f"missing observation {ref}") from None

    def __contains__(self, ref: str) -> bool:
        return ref in self._obs

    def __len__(self) -> int:
        return len(self._obs)

    def flush(self, directory: Path) -> int:
        directory.mkdir(parents=True, exist_ok=True)
        written = 0
        for ref in sorted(self._obs):
            path = directory / f"{ref}.json"
            if not path.exists():
                tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
                tmp.write_text(canonical_json(self._obs[ref].to_dict()) + "\n", encoding="utf-8")
                tmp.replace(path)
                written += 1
        return written

    def load(self, directory: Path, refs: Iterable[str]) -> None:
        for ref in refs:
            if ref in self._obs:
                continue
            path = Path(directory) / f"{ref}.json"
            if not path.exists():
                raise IntegrityError(f"observation {ref} missing from store")
            obs = Observation.from_dict(json.loads(path.read_text(encoding="utf-8")))
            if obs.state_hash != ref:
                raise IntegrityError(f"observation file {path} is corrupt")
            self._obs[ref] = obs


class TrajectoryTree:
    def __init__(self, task_id: str, root_observation: Observation,
                 store: Optional[ObservationStore] = None):
        self.task_id = task_id
        self.store = store if store is not None else ObservationStore()
        self.nodes: List[TreeNode] = [TreeNode(0, self.store.put(root_observation))]
        self.edges: List[TreeEdge] = []
        self.leaf_records: Dict[int, LeafRecord] = {}
        self.round_log: List[dict] = []

    # -- structure ---------------------------------------------------------
    @property
    def root(self) -> TreeNode:
        return self.nodes[0]

    def node(self, node_id: int) -> TreeNode:
        if not 0 <= node_id < len(self.nodes):
            raise IndexError(f"unknown node {node_id}")
        return self.nodes[node_id]

    def parent(self, node_id: int) -> Optional[int]:
        pe = self.node(node_id).parent_edge
        return None if pe is None else self.edges[pe].source

    def observation(self, node_id: int) -> Observation:
        return self.store.get(self.node(node_id).observation_ref)

    def is_leaf(self, node_id: int) -> bool:
        return not self.node(node_id).children

    def leaves(self) -> List[int]:
        return [n.node_id for n in self.nodes if not n.children]

    def depth(self, node_id: int) -> int:
        d = 0
        while self.nodes[node_id].parent_edge is not None:
            node_id = self.edges[self.nodes[node_id].parent_edge].source
            d += 1
        return d

    def _add_node(self, obs: Observation, parent_edge: int) -> int:
        nid = len(self.nodes)
        self.nodes.append(TreeNode(nid, self.store.put(obs), parent_edge))
        return nid

    def _match_child(self, node_id: int, action_text: str, obs_hash: str) -> Optional[int]:
        for eid in self.nodes[node_id].children:
            e = self.edges[eid]
            if canonical(e.action) == action_text and self.nodes[e.target].observation_ref == obs_hash:
                return eid
        return None

    def subtree_leaves(self, node_id: int) -> List[int]:
        out, stack = [], [node_id]
        while stack:
            n = stack.pop()
            ch = self.nodes[n].children
            if not ch:
                out.append(n)
            else:
                stack.extend(self.edges[e].target for e in reversed(ch))
        return sorted(out)

    def path_nodes(self, node_id: int) -> List[int]:
        path = [node_id]
        while self.nodes[path[-1]].parent_edge is not None:
            path.append(self.edges[self.nodes[path[-1]].parent_edge].source)
        return path[::-1]

    def path_edges(self, node_id: int) -> List[int]:
        edges = []
        n = self.node(node_id)
        while n.parent_edge is not None:
            edges.append(n.parent_edge)
            n = self.nodes[self.edges[n.parent_edge].source]
        return edges[::-1]

    def trajectory(self, leaf: int) -> Trajectory:
        edges = self.path_edges(leaf)
        actions = [self.edges[e].action for e in edges]
        status = actions[-1].status if actions and isinstance(actions[-1], Terminate) else None
        return Trajectory(leaf, self.path_nodes(leaf), edges, actions, status)

    def check_shape(self) -> None:
        """Raise if the tree invariants are broken."""
        if len(self.edges) != len(self.nodes) - 1:
            raise IntegrityError("edge count must equal node count minus one")
        seen = set()
        stack = [0]
        while stack:
            n = stack.pop()
            seen.add(n)
            keys = set()
            for eid in self.nodes[n].children:
                e = self.edges[eid]
                key = (canonical(e.action), self.nodes[e.target].observation_ref)
                if key in keys:
                    raise IntegrityError(f"duplicate child edge at node {n}")
                keys.add(key)
                stack.append(e.target)
        if len(seen) != len(self.nodes):
            raise IntegrityError("unreachable nodes")


# ---------------------------------------------------------------------------
# operations


def insert_rollout(tree: TrajectoryTree, start_node: int, steps: Sequence[RolloutStep],
                   branch_kind: str) -> int:
    """Append a rollout below ``start_node`` and return its leaf.

    Leading steps that repeat an existing child edge (same canonical action,
    same resulting observation) reuse that edge.
    """
    if branch_kind not in BRANCH_KINDS:
        raise ValueError(f"unknown branch kind {branch_kind!r}")
    node = tree.node(start_node)
    if node.stale:
        raise ExpansionRefused(f"node {start_node} is stale")
    if not steps:
        raise ValueError("a rollout needs at least one step")
    cur = start_node
    merging = True
    for st in steps:
        text = canonical(st.action)
        if merging:
            eid = tree._match_child(cur, text, st.observation.state_hash)
            if eid is not None:
                cur = tree.edges[eid].target
                continue
            merging = False
        eid = len(tree.edges)
        tree.edges.append(TreeEdge(eid, st.action, cur, -1, branch_kind, st.agent_output,
                                   st.spurious, st.injection))
        nid = tree._add_node(st.observation, eid)
        tree.edges[eid].target = nid
        tree.nodes[cur].children.append(eid)
        cur = nid
    return cur


def enumerate_trajectories(tree: TrajectoryTree) -> List[Trajectory]:
    return [tree.trajectory(leaf) for leaf in tree.leaves()]


def prune_by_reward(tree: TrajectoryTree, verdicts: Mapping[int, int]) -> TreePartition:
    part = TreePartition(set(), set(), set(), set())
    for leaf in tree.leaves():
        if leaf not in verdicts or verdicts[leaf] is None:
            raise IncompleteJudgment(f"trajectory {leaf} has no verdict")
        path = tree.path_nodes(leaf)
        if verdicts[leaf] == 1:
            part.corr_trajectories.add(leaf)
            part.corr_nodes.update(path)
        else:
            part.fail_trajectories.add(leaf)
            part.fail_nodes.update(path)
    return part


def tree_verdicts(tree: TrajectoryTree) -> Dict[int, int]:
    return {leaf: rec.reward for leaf, rec in tree.leaf_records.items() if rec.reward is not None}


def neighbor_branches(tree: TrajectoryTree, failed: Trajectory, i: int) -> List[TreeEdge]:
    """Outgoing edges of the i-th path node (1-based) whose action differs
    from the failed trajectory's action there."""
    if not 2 <= i <= len(failed.nodes):
        raise IndexError(f"step index {i} outside [2, {len(failed.nodes)}]")
    node = tree.node(failed.nodes[i - 1])
    if node.stale:
        return []
    taken = canonical(failed.actions[i - 1]) if i - 1 < len(failed.actions) else None
    return [tree.edges[e] for e in node.children
            if canonical(tree.edges[e].action) != taken and not tree.nodes[tree.edges[e].target].stale]


def _has_stale(tree: TrajectoryTree, leaf: int) -> bool:
    return any(tree.nodes[n].stale for n in tree.path_nodes(leaf))


def neighbor_trajectories(tree: TrajectoryTree, failed: Trajectory) -> List[int]:
    """Leaves of every complete trajectory that branches off ``failed`` at a
    non-root prefix node with a different action."""
    out: Set[int] = set()
    for i in range(2, len(failed.nodes) + 1):
        for e in neighbor_branches(tree, failed, i):
            out.update(l for l in tree.subtree_leaves(e.target) if not _has_stale(tree, l))
    out.discard(failed.trajectory_id)
    return sorted(out)


def path_actions(tree: TrajectoryTree, node_id: int) -> List[Action]:
    return [tree.edges[e].action for e in tree.path_edges(node_id)]


def path_hashes(tree: TrajectoryTree, node_id: int) -> List[str]:
    return [tree.nodes[n].observation_ref for n in tree.path_nodes(node_id)]


# ---------------------------------------------------------------------------
# persistence


def tree_records(tree: TrajectoryTree) -> List[dict]:
    recs: List[dict] = [{"type": "header", "format": FORMAT, "version": FORMAT_VERSION,
                         "task_id": tree.task_id, "nodes": len(tree.nodes), "edges": len(tree.edges)}]
    for n in tree.nodes:
        recs.append({"type": "node", **asdict(n)})
    for e in tree.edges:
        d = asdict(e)
        d["action"] = canonical(e.action)
        recs.append({"type": "edge", **d})
    for leaf in sorted(tree.leaf_records):
        recs.append({"type": "verdict", **asdict(tree.leaf_records[leaf])})
    return recs


def write_tree(tree: TrajectoryTree, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for rec in tree_records(tree):
            fh.write(canonical_json(rec) + "\n")
    tmp.replace(path)


def read_tree(path: Path, observations_dir: Optional[Path] = None,
              store: Optional[ObservationStore] = None) -> TrajectoryTree:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise IntegrityError(f"{path} is empty")
    recs = [json.loads(l) for l in lines]
    head = recs[0]
    if head.get("type") != "header" or head.get("format") != FORMAT:
        raise IntegrityError(f"{path} has no tree header")
    if head.get("version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported tree format version {head.get('version')}")
    store = store if store is not None else ObservationStore()
    nodes = [r for r in recs if r["type"] == "node"]
    if observations_dir is not None:
        store.load(observations_dir, [r["observation_ref"] for r in nodes])
    tree = TrajectoryTree.__new__(TrajectoryTree)
    tree.task_id = head["task_id"]
    tree.store = store
    tree.nodes = [TreeNode(**{k: v for k, v in r.items() if k != "type"}) for r in nodes]
    tree.edges = []
    for r in recs:
        if r["type"] == "edge":
            d = {k: v for k, v in r.items() if k != "type"}
            d["action"] = parse(d["action"])
            tree.edges.append(TreeEdge(**d))
    tree.leaf_records = {}
    tree.round_log = []
    for r in recs:
        if r["type"] == "verdict":
            d = {k: v for k, v in r.items() if k != "type"}
            tree.leaf_records[d["leaf"]] = LeafRecord(**d)
    if len(tree.nodes) != head["nodes"] or len(tree.edges) != head["edges"]:
        raise IntegrityError(f"{path} is truncated")
    return tree
