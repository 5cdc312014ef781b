"""On-disk store layout shared by every command.

::

    tasks/<task_id>.json          task specs
    snapshots/<id>.json           base snapshots (content addressed)
    trees/<task_id>.jsonl         tree record file
    trees/<task_id>.rounds.jsonl  per-round log
    trees/<task_id>.done          completion marker
    trajectories/<task_id>.jsonl  one record per leaf trajectory
    observations/<hash>.json      content-addressed observations
    cases/<case_id>.json          robustness test cases
    datasets/<run_id>/<name>.jsonl  training records plus manifest
    reports/                      csv and text tables
    runs/<run_id>/manifest.jsonl  append-only run manifests
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from .env.desk import SnapshotRegistry, TaskSpec, canonical_json, load_task
from .errors import ConfigurationError, IntegrityError, NotFound


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_jsonl(path: Path, records) -> None:
    write_text_atomic(path, "".join(canonical_json(r) + "\n" for r in records))


class Store:
    def __init__(self, root: Path):
        self.root = Path(root)

    # -- layout --------------------------------------------------------------
    @property
    def tasks_dir(self) -> Path:
        return self.root / "tasks"

    @property
    def snapshots_dir(self) -> Path:
        return self.root / "snapshots"

    @property
    def trees_dir(self) -> Path:
        return self.root / "trees"

    @property
    def trajectories_dir(self) -> Path:
        return self.root / "trajectories"

    @property
    def observations_dir(self) -> Path:
        return self.root / "observations"

    @property
    def cases_dir(self) -> Path:
        return self.root / "cases"

    @property
    def datasets_dir(self) -> Path:
        return self.root / "datasets"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    def ensure(self) -> "Store":
        try:
            for d in (self.tasks_dir, self.snapshots_dir, self.trees_dir, self.trajectories_dir,
                      self.observations_dir, self.cases_dir, self.datasets_dir, self.reports_dir, self.runs_dir):
                d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigurationError(f"store root {self.root} is not writable: {exc}") from exc
        return self

    def tree_path(self, task_id: str) -> Path:
        return self.trees_dir / f"{task_id}.jsonl"

    def rounds_path(self, task_id: str) -> Path:
        return self.trees_dir / f"{task_id}.rounds.jsonl"

    def marker_path(self, task_id: str) -> Path:
        return self.trees_dir / f"{task_id}.done"

    def trajectories_path(self, task_id: str) -> Path:
        return self.trajectories_dir / f"{task_id}.jsonl"

    def run_dir(self, run_id: str) -> Path:
        return self.runs_dir / run_id

    # -- tasks ---------------------------------------------------------------
    def task_paths(self, pattern: str = "*.json") -> List[Path]:
        if not self.tasks_dir.is_dir():
            return []
        # the glob may name files ("desk-*.json") or task ids ("desk-*")
        return sorted(p for p in self.tasks_dir.iterdir() if p.suffix == ".json"
                      and (fnmatch.fnmatch(p.name, pattern) or fnmatch.fnmatch(p.stem, pattern)))

    def load_task(self, task_id: str) -> TaskSpec:
        path = self.tasks_dir / f"{task_id}.json"
        if not path.exists():
            raise NotFound(f"task {task_id} not in store")
        return load_task(path)

    def registry(self) -> SnapshotRegistry:
        return SnapshotRegistry.load_dir(self.snapshots_dir)

    # -- markers -------------------------------------------------------------
    def read_marker(self, task_id: str) -> Optional[Dict[str, Any]]:
        path = self.marker_path(task_id)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IntegrityError(f"completion marker {path} is corrupt") from exc

    def write_marker(self, task_id: str, body: Mapping[str, Any]) -> None:
        write_text_atomic(self.marker_path(task_id), canonical_json(dict(body)) + "\n")

    def finished_tasks(self) -> List[str]:
        if not self.trees_dir.is_dir():
            return []
        return sorted(p.name[: -len(".done")] for p in self.trees_dir.glob("*.done"))

    def check_marker(self, task_id: str) -> Dict[str, Any]:
        """Marker of a finished task after checking its tree file digest."""
        marker = self.read_marker(task_id)
        if marker is None:
            raise NotFound(f"task {task_id} has no finished tree")
        path = self.tree_path(task_id)
        if not path.exists() or file_digest(path) != marker.get("tree_sha256"):
            raise IntegrityError(f"tree file for {task_id} does not match its completion marker")
        return marker

    # -- manifests -----------------------------------------------------------
    def append_manifest(self, run_id: str, record: Mapping[str, Any]) -> Path:
        path = self.run_dir(run_id) / "manifest.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(dict(record), sort_keys=True) + "\n")
        return path

    def manifests(self, run_id: str) -> List[Dict[str, Any]]:
        path = self.run_dir(run_id) / "manifest.jsonl"
        if not path.exists():
            raise NotFound(f"run {run_id!r} not found under {self.runs_dir}")
        out = []
        for i, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IntegrityError(f"{path} line {i + 1} is corrupt") from exc
        if not out:
            raise NotFound(f"run {run_id!r} has an empty manifest")
        return out

    def run_ids(self) -> List[str]:
        if not self.runs_dir.is_dir():
            return []
        return sorted(p.name for p in self.runs_dir.iterdir() if (p / "manifest.jsonl").exists())
