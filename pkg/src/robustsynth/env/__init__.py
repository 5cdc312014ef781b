"""Deterministic simulated desktop environment."""

from .actions import (Action, ActionParseError, Click, Hotkey, Scroll, Terminate, Type, canonical,
                      find_action, parse)
from .desk import (EnvHandle, Milestone, Observation, Snapshot, SnapshotRegistry, TaskSpec, Widget,
                   default_registry, init_env, load_task, replay_prefix, restore, save, save_task,
                   snapshot_restore, step, transition)
from .model import DeskModel, desk_model, task_succeeded
from .templates import generate_suite, make_task

__all__ = [
    "Action", "ActionParseError", "Click", "Hotkey", "Scroll", "Terminate", "Type", "canonical",
    "find_action", "parse", "EnvHandle", "Milestone", "Observation", "Snapshot", "SnapshotRegistry",
    "TaskSpec", "Widget", "default_registry", "init_env", "load_task", "replay_prefix", "restore",
    "save", "save_task", "snapshot_restore", "step", "transition", "DeskModel", "desk_model",
    "task_succeeded", "generate_suite", "make_task",
]
