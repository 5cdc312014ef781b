"""Exact planning model of a ScriptedDesk task.

Text variables only matter through equality with constants named in the
task's predicates, so every other value is collapsed into one ``OTHER``
symbol, and variables that no predicate reads are dropped.  The collapsed state graph is small enough to enumerate; distances
to the goal come from a reverse breadth-first search over it.
"""

from __future__ import annotations

from collections import deque
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .actions import Action, Click, Hotkey, Scroll, Terminate, Type
from .desk import (RESERVED, RUNNING, Snapshot, SnapshotRegistry, TaskSpec, default_registry, holds,
                   initial_state, transition)

OTHER = "\x00other"
INF = 10**9

AState = Tuple[Tuple[str, Any], ...]


def task_succeeded(task: TaskSpec, state: Mapping[str, Any]) -> bool:
    """The episode counts as solved: goal holds and the agent declared success."""
    return state.get("status") == "success" and holds(task.goal_predicate, state)


class DeskModel:
    def __init__(self, task: TaskSpec, registry: Optional[SnapshotRegistry] = None):
        self.task = task
        self.snapshot: Snapshot = (registry or default_registry()).get(task.snapshot_id)
        snap = self.snapshot
        self.text_vars = {w.var for w in snap.widgets if w.kind == "field" and w.var}
        consts: Dict[str, set] = {v: set() for v in self.text_vars}
        preds = [task.goal_predicate] + [m.predicate for m in task.milestones]
        preds += [w.enabled_when for w in snap.widgets]
        preds += [sc.get("enabled_when", {}) for sc in snap.shortcuts.values()]
        mentioned = set(RESERVED)
        for p in preds:
            for k, v in p.items():
                mentioned.add(k)
                if k in consts:
                    consts[k].add(v)
        self.relevant = consts
        # variables no predicate reads cannot influence distances
        self.ignored = {k for k in snap.vars if k not in mentioned}
        self.candidates: List[Action] = self._candidate_actions()
        self.initial = initial_state(task, registry)
        self._succ: Dict[AState, List[AState]] = {}
        self._dist: Dict[AState, int] = {}
        self._build(self.abstract(self.initial))

    # -- abstraction -------------------------------------------------------
    def abstract(self, state: Mapping[str, Any]) -> AState:
        items = []
        for k in sorted(state):
            if k in self.ignored:
                continue
            v = state[k]
            if k in self.text_vars and v not in self.relevant[k]:
                v = OTHER
            items.append((k, v))
        return tuple(items)

    def _candidate_actions(self) -> List[Action]:
        acts: List[Action] = [Click(w.id) for w in self.snapshot.widgets]
        texts = sorted({str(v) for vals in self.relevant.values() for v in vals})
        acts += [Type(t) for t in texts] + [Type(OTHER)]
        acts += [Hotkey(tuple(k.split("+"))) for k in sorted(self.snapshot.shortcuts)]
        acts += [Scroll("down", 1), Scroll("up", 1), Terminate("success"), Terminate("failure")]
        return acts

    def _build(self, start: AState) -> None:
        if start in self._succ:
            return
        queue = deque([start])
        self._succ[start] = []
        new: List[AState] = [start]
        while queue:
            s = queue.popleft()
            sd = dict(s)
            succ = set()
            if sd.get("status") == RUNNING:
                for a in self.candidates:
                    t = self.abstract(transition(self.snapshot, sd, a))
                    if t != s:
                        succ.add(t)
            self._succ[s] = sorted(succ, key=repr)
            for t in self._succ[s]:
                if t not in self._succ:
                    self._succ[t] = []
                    new.append(t)
                    queue.append(t)
        self._recompute_distances()

    def _recompute_distances(self) -> None:
        pred: Dict[AState, List[AState]] = {s: [] for s in self._succ}
        for s, ts in self._succ.items():
            for t in ts:
                pred[t].append(s)
        dist: Dict[AState, int] = {}
        queue = deque()
        for s in self._succ:
            if task_succeeded(self.task, dict(s)):
                dist[s] = 0
                queue.append(s)
        while queue:
            t = queue.popleft()
            for s in pred[t]:
                if s not in dist:
                    dist[s] = dist[t] + 1
                    queue.append(s)
        self._dist = dist

    # -- queries -----------------------------------------------------------
    @property
    def n_states(self) -> int:
        return len(self._succ)

    def distance(self, state: Mapping[str, Any]) -> int:
        a = self.abstract(state)
        if a not in self._succ:
            self._build(a)
        return self._dist.get(a, INF)

    def step(self, state: Mapping[str, Any], action: Action) -> Dict[str, Any]:
        return transition(self.snapshot, state, action)

    def useful(self, state: Mapping[str, Any], action: Action) -> bool:
        d = self.distance(state)
        return d < INF and self.distance(self.step(state, action)) == d - 1

    def useful_actions(self, state: Mapping[str, Any]) -> List[Action]:
        return [a for a in self.candidates if not (isinstance(a, Type) and a.text == OTHER)
                and self.useful(state, a)]

    def plan_action(self, state: Mapping[str, Any]) -> Action:
        """First useful candidate in a fixed order; gives up when unsolvable."""
        for a in self.useful_actions(state):
            return a
        return Terminate("failure")

    def plan(self, state: Mapping[str, Any], limit: int = 200) -> List[Action]:
        out: List[Action] = []
        s = dict(state)
        while len(out) < limit and s.get("status") == RUNNING:
            a = self.plan_action(s)
            out.append(a)
            s = self.step(s, a)
        return out

    def milestones_done(self, state: Mapping[str, Any]) -> List[bool]:
        return [holds(m.predicate, state) for m in self.task.milestones]


_CACHE: Dict[Tuple[str, int], DeskModel] = {}


def desk_model(task: TaskSpec, registry: Optional[SnapshotRegistry] = None) -> DeskModel:
    key = (task.fingerprint(), id(registry) if registry is not None else 0)
    model = _CACHE.get(key)
    if model is None:
        if len(_CACHE) > 512:
            _CACHE.clear()
        model = _CACHE[key] = DeskModel(task, registry)
    return model


__all__ = ["DeskModel", "desk_model", "task_succeeded", "INF", "OTHER"]
