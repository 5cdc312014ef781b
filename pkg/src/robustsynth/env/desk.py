"""ScriptedDesk: a deterministic, snapshot-restorable symbolic GUI.

State is a flat mapping of variable name to scalar.  Three variables are
reserved: ``focus`` (id of the focused field widget, or ``""``), ``scroll``
(integer offset) and ``status`` (``running``/``success``/``failure``).
Widgets, keyboard shortcuts and initial values come from a base snapshot;
a task applies its ``setup_ops`` on top of that snapshot.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, IntegrityError, ProtocolError, TaskSetupError
from .actions import Action, Click, Hotkey, Scroll, Terminate, Type, canonical

RESERVED = ("focus", "scroll", "status")
RUNNING = "running"

Predicate = Dict[str, Any]


def _digest(payload: str, size: int = 8) -> str:
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=size).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def holds(predicate: Mapping[str, Any], state: Mapping[str, Any]) -> bool:
    return all(state.get(k) == v for k, v in predicate.items())


@dataclass(frozen=True)
class Widget:
    id: str
    kind: str  # button | field | checkbox
    label: str
    enabled_when: Predicate = field(default_factory=dict)
    effects: Predicate = field(default_factory=dict)
    var: Optional[str] = None  # backing variable for field / checkbox

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "label": self.label,
             "enabled_when": dict(self.enabled_when), "effects": dict(self.effects)}
        if self.var is not None:
            d["var"] = self.var
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Widget":
        return cls(d["id"], d["kind"], d["label"], dict(d.get("enabled_when", {})),
                   dict(d.get("effects", {})), d.get("var"))


@dataclass(frozen=True)
class Snapshot:
    """Base application image: variables, widgets and shortcuts."""

    name: str
    vars: Dict[str, Any]
    widgets: Tuple[Widget, ...]
    shortcuts: Dict[str, Dict[str, Predicate]] = field(default_factory=dict)
    max_scroll: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "_index", {w.id: w for w in self.widgets})

    def body(self) -> dict:
        return {
            "name": self.name,
            "vars": dict(self.vars),
            "widgets": [w.to_dict() for w in self.widgets],
            "shortcuts": {k: {"enabled_when": dict(v.get("enabled_when", {})),
                              "effects": dict(v.get("effects", {}))}
                          for k, v in self.shortcuts.items()},
            "max_scroll": self.max_scroll,
        }

    @property
    def snapshot_id(self) -> str:
        return "snap-" + _digest(canonical_json(self.body()), 6)

    def to_dict(self) -> dict:
        return {"snapshot_id": self.snapshot_id, **self.body()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Snapshot":
        snap = cls(d["name"], dict(d["vars"]), tuple(Widget.from_dict(w) for w in d["widgets"]),
                   {k: dict(v) for k, v in d.get("shortcuts", {}).items()}, int(d.get("max_scroll", 0)))
        for r in RESERVED:
            if r not in snap.vars:
                raise ConfigurationError(f"snapshot {snap.name!r} lacks reserved var {r!r}")
        if "snapshot_id" in d and d["snapshot_id"] != snap.snapshot_id:
            raise IntegrityError(f"snapshot content does not match id {d['snapshot_id']}")
        return snap

    def widget(self, widget_id: str) -> Optional[Widget]:
        return self._index.get(widget_id)


class SnapshotRegistry:
    """Read-only (after loading) map from snapshot id to base snapshot."""

    def __init__(self, snapshots: Sequence[Snapshot] = ()):
        self._snaps: Dict[str, Snapshot] = {}
        for s in snapshots:
            self.register(s)

    def register(self, snap: Snapshot) -> str:
        self._snaps[snap.snapshot_id] = snap
        return snap.snapshot_id

    def get(self, snapshot_id: str) -> Snapshot:
        try:
            return self._snaps[snapshot_id]
        except KeyError:
            raise ConfigurationError(f"unknown snapshot {snapshot_id!r}") from None

    def __contains__(self, snapshot_id: str) -> bool:
        return snapshot_id in self._snaps

    def __iter__(self):
        return iter(self._snaps.values())

    def save_dir(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for sid, snap in sorted(self._snaps.items()):
            path = directory / f"{sid}.json"
            if not path.exists():
                path.write_text(canonical_json(snap.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load_dir(cls, directory: Path) -> "SnapshotRegistry":
        reg = cls()
        for path in sorted(Path(directory).glob("*.json")):
            snap = Snapshot.from_dict(json.loads(path.read_text(encoding="utf-8")))
            if path.stem != snap.snapshot_id:
                raise IntegrityError(f"{path} does not hold snapshot {path.stem}")
            reg.register(snap)
        return reg


@dataclass
class Milestone:
    description: str
    predicate: Predicate


@dataclass
class TaskSpec:
    task_id: str
    instruction: str
    snapshot_id: str
    setup_ops: List[dict]
    milestones: List[Milestone]
    goal_predicate: Predicate
    max_steps: int = 30
    stochasticity: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if not 0.0 <= self.stochasticity <= 1.0:
            raise ConfigurationError("stochasticity must lie in [0, 1]")
        if not self.milestones:
            raise ConfigurationError("a task needs at least one milestone")
        final = self.milestones[-1].predicate
        if any(self.goal_predicate.get(k, object()) != v for k, v in final.items()):
            raise ConfigurationError("goal predicate must imply the final milestone")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "snapshot_id": self.snapshot_id,
            "setup_ops": [dict(op) for op in self.setup_ops],
            "milestones": [{"description": m.description, "predicate": dict(m.predicate)}
                           for m in self.milestones],
            "goal_predicate": dict(self.goal_predicate),
            "max_steps": self.max_steps,
            "stochasticity": self.stochasticity,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskSpec":
        return cls(
            task_id=d["task_id"],
            instruction=d["instruction"],
            snapshot_id=d["snapshot_id"],
            setup_ops=[dict(op) for op in d.get("setup_ops", [])],
            milestones=[Milestone(m["description"], dict(m["predicate"])) for m in d["milestones"]],
            goal_predicate=dict(d["goal_predicate"]),
            max_steps=int(d.get("max_steps", 30)),
            stochasticity=float(d.get("stochasticity", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    def fingerprint(self) -> str:
        return _digest(canonical_json(self.to_dict()))


def save_task(task: TaskSpec, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(task.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_task(path: Path) -> TaskSpec:
    return TaskSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Pure transition function


def widget_enabled(w: Widget, state: Mapping[str, Any]) -> bool:
    return state.get("status") == RUNNING and holds(w.enabled_when, state)


def transition(snap: Snapshot, state: Mapping[str, Any], action: Action) -> Dict[str, Any]:
    """Deterministic FSM successor.  Illegal targets are silent no-ops."""
    new = dict(state)
    if state.get("status") != RUNNING:
        return new
    if isinstance(action, Click):
        w = snap.widget(action.widget_id)
        if w is None or not widget_enabled(w, state):
            return new
        if w.kind == "field":
            new["focus"] = w.id
        elif w.kind == "checkbox" and w.var is not None:
            new[w.var] = not bool(state.get(w.var))
        new.update(w.effects)
    elif isinstance(action, Type):
        w = snap.widget(str(state.get("focus", "")))
        if w is not None and w.kind == "field" and w.var is not None and widget_enabled(w, state):
            new[w.var] = action.text
    elif isinstance(action, Hotkey):
        sc = snap.shortcuts.get("+".join(k.lower() for k in action.keys))
        if sc is not None and holds(sc.get("enabled_when", {}), state):
            new.update(sc.get("effects", {}))
    elif isinstance(action, Scroll):
        delta = action.amount if action.direction == "down" else -action.amount
        new["scroll"] = min(max(int(state.get("scroll", 0)) + delta, 0), snap.max_scroll)
    elif isinstance(action, Terminate):
        new["status"] = action.status
    return new


def state_hash(state: Mapping[str, Any]) -> str:
    return _digest(canonical_json(dict(state)))


@dataclass(frozen=True)
class Observation:
    state_hash: str
    widgets: Tuple[Tuple[str, str, str, bool], ...]
    screen_note: str
    # Ground-truth variables, read only by the scripted oracles.
    state: Optional[Dict[str, Any]] = field(default=None, compare=False, hash=False, repr=False)

    def to_dict(self) -> dict:
        d = {"state_hash": self.state_hash,
             "widgets": [list(w) for w in self.widgets],
             "screen_note": self.screen_note}
        if self.state is not None:
            d["state"] = dict(self.state)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Observation":
        state = d.get("state")
        if state is not None and state_hash(state) != d["state_hash"]:
            raise IntegrityError("observation state does not match its hash")
        return cls(d["state_hash"], tuple((w[0], w[1], w[2], bool(w[3])) for w in d["widgets"]),
                   d["screen_note"], dict(state) if state is not None else None)


def observe(snap: Snapshot, state: Mapping[str, Any]) -> Observation:
    widgets = tuple((w.id, w.kind, w.label, widget_enabled(w, state)) for w in snap.widgets)
    note = "; ".join(f"{k}={state[k]!r}" for k in sorted(state))
    return Observation(state_hash(state), widgets, note, dict(state))


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class EnvHandle:
    task: TaskSpec
    snapshot: Snapshot
    state: Dict[str, Any]
    rng: np.random.Generator
    step_count: int = 0
    terminated: bool = False
    diverged: bool = False
    last_spurious: bool = False
    spurious_steps: List[int] = field(default_factory=list)

    def observation(self) -> Observation:
        return observe(self.snapshot, self.state)


_DEFAULT_REGISTRY: Optional[SnapshotRegistry] = None


def default_registry() -> SnapshotRegistry:
    global _DEFAULT_REGISTRY
    if _DEFAULT_REGISTRY is None:
        from .templates import builtin_snapshots

        _DEFAULT_REGISTRY = SnapshotRegistry(builtin_snapshots())
    return _DEFAULT_REGISTRY


def initial_state(task: TaskSpec, registry: Optional[SnapshotRegistry] = None) -> Dict[str, Any]:
    snap = (registry or default_registry()).get(task.snapshot_id)
    state = dict(snap.vars)
    for op in task.setup_ops:
        if op.get("op") != "set" or op.get("var") not in state or op["var"] in ("status",):
            raise TaskSetupError(f"task {task.task_id}: invalid setup op {op!r}")
        state[op["var"]] = op["value"]
    return state


def episode_rng(task: TaskSpec, episode: int) -> np.random.Generator:
    return np.random.default_rng([task.seed & 0xFFFFFFFFFFFFFFFF, 0x5EED, int(episode)])


def init_env(task: TaskSpec, registry: Optional[SnapshotRegistry] = None,
             episode: int = 0) -> Tuple[EnvHandle, Observation]:
    reg = registry or default_registry()
    snap = reg.get(task.snapshot_id)
    handle = EnvHandle(task, snap, initial_state(task, reg), episode_rng(task, episode))
    return handle, handle.observation()


def _spurious_successor(snap: Snapshot, state: Dict[str, Any], intended: Dict[str, Any]) -> Dict[str, Any]:
    if intended != state:
        return dict(state)  # action silently dropped
    for w in snap.widgets:
        if w.kind != "field" and widget_enabled(w, state):
            alt = transition(snap, state, Click(w.id))
            if alt != state:
                return alt
    return dict(state)


def step(handle: EnvHandle, action: Action) -> Observation:
    if handle.terminated:
        raise ProtocolError("episode already terminated")
    if handle.step_count >= handle.task.max_steps:
        raise ProtocolError(f"step budget {handle.task.max_steps} exhausted")
    intended = transition(handle.snapshot, handle.state, action)
    # One draw per step keeps the random stream aligned across replays.
    draw = handle.rng.random()
    handle.step_count += 1
    handle.last_spurious = False
    if draw < handle.task.stochasticity and not isinstance(action, Terminate):
        handle.state = _spurious_successor(handle.snapshot, handle.state, intended)
        handle.last_spurious = True
        handle.spurious_steps.append(handle.step_count)
    else:
        handle.state = intended
    if isinstance(action, Terminate):
        handle.terminated = True
    return handle.observation()


def save(handle: EnvHandle) -> bytes:
    payload = {
        "v": 1,
        "task": handle.task.to_dict(),
        "snapshot_id": handle.snapshot.snapshot_id,
        "state": handle.state,
        "step_count": handle.step_count,
        "terminated": handle.terminated,
        "diverged": handle.diverged,
        "last_spurious": handle.last_spurious,
        "spurious_steps": handle.spurious_steps,
        "rng": handle.rng.bit_generator.state,
    }
    body = canonical_json(payload)
    return canonical_json({"body": body, "checksum": _digest(body, 16)}).encode("utf-8")


def restore(blob: bytes, registry: Optional[SnapshotRegistry] = None) -> EnvHandle:
    try:
        outer = json.loads(blob.decode("utf-8"))
        body = outer["body"]
        ok = _digest(body, 16) == outer["checksum"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IntegrityError(f"unreadable snapshot blob: {exc}") from exc
    if not ok:
        raise IntegrityError("snapshot blob checksum mismatch")
    p = json.loads(body)
    task = TaskSpec.from_dict(p["task"])
    snap = (registry or default_registry()).get(p["snapshot_id"])
    bitgen = getattr(np.random, p["rng"]["bit_generator"])()
    bitgen.state = p["rng"]
    return EnvHandle(task, snap, p["state"], np.random.Generator(bitgen), p["step_count"],
                     p["terminated"], p["diverged"], p["last_spurious"], list(p["spurious_steps"]))


def snapshot_restore(handle: EnvHandle, registry: Optional[SnapshotRegistry] = None) -> EnvHandle:
    return restore(save(handle), registry)


def replay_prefix(task: TaskSpec, actions: Sequence[Action],
                  expected_hashes: Optional[Sequence[str]] = None,
                  registry: Optional[SnapshotRegistry] = None,
                  episode: int = 0) -> Tuple[EnvHandle, List[Observation]]:
    """Re-initialise from the task snapshot and apply ``actions`` in order.

    ``expected_hashes`` (initial observation first) marks the handle as
    diverged on the first mismatch; replay still runs to the end.
    """
    if len(actions) > task.max_steps:
        raise ProtocolError("prefix longer than the step budget")
    handle, obs = init_env(task, registry, episode)
    observations = [obs]
    for a in actions:
        observations.append(step(handle, a))
    if expected_hashes is not None:
        for got, want in zip(observations, expected_hashes):
            if got.state_hash != want:
                handle.diverged = True
                break
    return handle, observations


def describe_action(snap: Snapshot, action: Action) -> str:
    if isinstance(action, Click):
        w = snap.widget(action.widget_id)
        return f"click '{w.label}'" if w else f"click unknown element {action.widget_id}"
    if isinstance(action, Type):
        return f"type {action.text!r}"
    if isinstance(action, Hotkey):
        return "press " + "+".join(action.keys)
    if isinstance(action, Scroll):
        return f"scroll {action.direction} {action.amount}"
    return f"finish the task ({action.status})" if isinstance(action, Terminate) else canonical(action)
