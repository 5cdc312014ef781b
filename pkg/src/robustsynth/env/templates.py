"""Built-in ScriptedDesk applications and a seeded task generator.

Every application has a few settings panels.  A panel is opened with its
own button, edited through a text field and committed with an apply button.
Tasks ask for two or three panels to be set to given values and the document
to be saved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .desk import Milestone, Snapshot, TaskSpec, Widget


@dataclass(frozen=True)
class PanelDef:
    key: str
    label: str
    options: Tuple[str, ...]


@dataclass(frozen=True)
class AppDef:
    name: str
    title: str
    panels: Tuple[PanelDef, ...]
    max_scroll: int
    save_hotkey: Optional[str]


APPS: Tuple[AppDef, ...] = (
    AppDef("writer", "Writer", (
        PanelDef("font_size", "Font size", ("10", "12", "14", "16")),
        PanelDef("line_spacing", "Line spacing", ("1.0", "1.5", "2.0")),
        PanelDef("margin", "Margins", ("narrow", "normal", "wide")),
    ), max_scroll=0, save_hotkey="ctrl+s"),
    AppDef("sheet", "Spreadsheet", (
        PanelDef("col_width", "Column width", ("8", "12", "20")),
        PanelDef("number_format", "Number format", ("general", "percent", "currency")),
        PanelDef("sheet_name", "Sheet name", ("Budget", "Summary", "Q3")),
    ), max_scroll=1, save_hotkey="ctrl+s"),
    AppDef("settings", "System Settings", (
        PanelDef("language", "Language", ("English", "Japanese", "German")),
        PanelDef("timezone", "Time zone", ("UTC", "Asia/Tokyo", "Europe/Berlin")),
        PanelDef("theme", "Theme", ("light", "dark", "contrast")),
    ), max_scroll=1, save_hotkey=None),
    AppDef("mail", "Mail", (
        PanelDef("recipient", "Recipient", ("ana@example.com", "li@example.com", "sam@example.com")),
        PanelDef("subject", "Subject", ("Report", "Invoice", "Agenda")),
        PanelDef("signature", "Signature", ("Best", "Regards", "Thanks")),
    ), max_scroll=0, save_hotkey="ctrl+s"),
)


def build_snapshot(app: AppDef) -> Snapshot:
    vars_: Dict[str, object] = {"focus": "", "scroll": 0, "status": "running",
                                "panel": "none", "saved": False, "ruler": False}
    widgets: List[Widget] = []
    for p in app.panels:
        vars_[p.key] = ""
        vars_[f"applied_{p.key}"] = False
        widgets.append(Widget(f"open_{p.key}", "button", f"{p.label}...",
                              {"panel": "none"}, {"panel": p.key}))
        widgets.append(Widget(f"field_{p.key}", "field", f"{p.label} input",
                              {"panel": p.key}, {}, var=p.key))
        widgets.append(Widget(f"apply_{p.key}", "button", f"Apply {p.label}",
                              {"panel": p.key},
                              {"panel": "none", "focus": "", f"applied_{p.key}": True, "saved": False}))
    widgets.append(Widget("close", "button", "Close dialog", {}, {"panel": "none", "focus": ""}))
    save_gate = {"panel": "none"}
    if app.max_scroll:
        save_gate["scroll"] = app.max_scroll  # save button sits below the fold
    widgets.append(Widget("save", "button", "Save", save_gate, {"saved": True}))
    widgets.append(Widget("ruler", "checkbox", "Show ruler", {}, {}, var="ruler"))
    widgets.append(Widget("help", "button", "Help (offline)", {"status": "locked"}, {}))
    shortcuts = {}
    if app.save_hotkey:
        shortcuts[app.save_hotkey] = {"enabled_when": {"panel": "none"}, "effects": {"saved": True}}
    return Snapshot(app.name, vars_, tuple(widgets), shortcuts, app.max_scroll)


def builtin_snapshots() -> List[Snapshot]:
    return [build_snapshot(a) for a in APPS]


def app_by_snapshot(snapshot_id: str) -> Optional[AppDef]:
    for a in APPS:
        if build_snapshot(a).snapshot_id == snapshot_id:
            return a
    return None


def typo(value: str) -> str:
    """A near-miss spelling of ``value`` (adjacent characters swapped)."""
    if len(value) >= 2:
        i = len(value) // 2
        swapped = value[: i - 1] + value[i] + value[i - 1] + value[i + 1:]
        if swapped != value:
            return swapped
    return value + value[-1:] if value else "x"


def make_task(task_id: str, seed: int, app: Optional[AppDef] = None, n_milestones: Optional[int] = None,
              stochasticity: float = 0.0, max_steps: int = 30) -> TaskSpec:
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x7A5C])
    if app is None:
        app = APPS[int(rng.integers(len(APPS)))]
    snap = build_snapshot(app)
    m = int(n_milestones if n_milestones is not None else rng.integers(2, 4))
    m = max(1, min(m, len(app.panels)))
    chosen = sorted(rng.choice(len(app.panels), size=m, replace=False).tolist())
    panels = [app.panels[i] for i in chosen]
    targets = [p.options[int(rng.integers(len(p.options)))] for p in panels]

    setup_ops: List[dict] = []
    if rng.random() < 0.5:
        # pre-fill one of the task fields with a wrong value
        j = int(rng.integers(m))
        wrong = [o for o in panels[j].options if o != targets[j]]
        setup_ops.append({"op": "set", "var": panels[j].key, "value": wrong[int(rng.integers(len(wrong)))]})
    if rng.random() < 0.3:
        setup_ops.append({"op": "set", "var": "ruler", "value": True})

    milestones = [Milestone(f"{p.label} is set to {t!r} and applied", {p.key: t, f"applied_{p.key}": True})
                  for p, t in zip(panels, targets)]
    milestones.append(Milestone("The document is saved", {"saved": True}))
    goal: Dict[str, object] = {}
    for ms in milestones:
        goal.update(ms.predicate)
    parts = [f"set {p.label} to {t}" for p, t in zip(panels, targets)]
    instruction = f"In {app.title}, " + ", ".join(parts) + ", then save."
    return TaskSpec(task_id, instruction, snap.snapshot_id, setup_ops, milestones, goal,
                    max_steps=max_steps, stochasticity=stochasticity, seed=seed)


def generate_suite(n: int, base_seed: int = 0, stochasticity: float = 0.0,
                   max_steps: int = 30, prefix: str = "desk") -> List[TaskSpec]:
    return [make_task(f"{prefix}-{i:04d}", base_seed * 100003 + i, stochasticity=stochasticity,
                      max_steps=max_steps) for i in range(n)]


def vocabulary(task: TaskSpec, app: Optional[AppDef] = None) -> Dict[str, Sequence[str]]:
    """Per field variable: every value the scripted agents may type."""
    app = app or app_by_snapshot(task.snapshot_id)
    vocab: Dict[str, Sequence[str]] = {}
    if app is None:
        return vocab
    for p in app.panels:
        vals = list(p.options)
        vals += [typo(o) for o in p.options if typo(o) not in vals]
        vocab[p.key] = vals
    return vocab
