import numpy as np
import pytest

from robustsynth.env import Click, Terminate, desk_model, make_task, init_env
from robustsynth.env.desk import Milestone, Snapshot, SnapshotRegistry, TaskSpec, Widget


@pytest.fixture
def task():
    return make_task("t-fixture", 11, n_milestones=2)


@pytest.fixture
def long_task():
    return make_task("t-long", 3, n_milestones=3)


def plan_for(task, registry=None):
    handle, _ = init_env(task, registry)
    return desk_model(task, registry).plan(handle.state)


def tiny_snapshot():
    """A five-widget application: toggle, two buttons, a field, a save button."""
    widgets = (
        Widget("go", "button", "Go", {}, {"panel": "p"}),
        Widget("back", "button", "Back", {"panel": "p"}, {"panel": "none"}),
        Widget("name", "field", "Name", {"panel": "p"}, {}, var="name"),
        Widget("flag", "checkbox", "Flag", {}, {}, var="flag"),
        Widget("save", "button", "Save", {"panel": "none"}, {"saved": True}),
    )
    vars_ = {"focus": "", "scroll": 0, "status": "running", "panel": "none", "saved": False,
             "flag": False, "name": ""}
    return Snapshot("tiny", vars_, widgets)


def tiny_task(snap, **kw):
    ms = [Milestone("saved", {"saved": True})]
    return TaskSpec("tiny-1", "Save the document.", snap.snapshot_id, [], ms, {"saved": True}, **kw)


@pytest.fixture
def tiny():
    snap = tiny_snapshot()
    return tiny_task(snap), SnapshotRegistry([snap])


# -- acceptance verdict lines --------------------------------------------------

_VERDICTS = pytest.StashKey[dict]()


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.ok, self.detail = False, ""


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    from contextlib import contextmanager

    verdicts = request.config.stash.setdefault(_VERDICTS, {})

    @contextmanager
    def run(number, title):
        c = Criterion(number, title)
        try:
            yield c
        except Exception as exc:
            c.ok, c.detail = False, f"{type(exc).__name__}: {exc}"
            raise
        finally:
            line = f"{'PASS' if c.ok else 'FAIL'} criterion {number}: {title} [{c.detail}]"
            verdicts[number] = line
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
