"""HTTP adapter for oracles hosted behind ``POST <endpoint>/<role>``.

Request body (JSON)::

    {"version": 1, "role": "<role>", "request": {...role specific...}}

Responses are JSON objects; the fields read per role are listed on each
wrapper below.  Any transport failure, non-2xx status or malformed body is
retried with exponential backoff and finally surfaces as
:class:`JudgeUnavailable`.  A verdict is never invented.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Sequence

import requests

from ..env.actions import ActionParseError, Action, canonical, parse
from ..env.desk import Observation
from ..errors import JudgeUnavailable
from .types import HistoryStep, ProgressVerdict, Proposal, RewardVerdict, TrajectoryExperience

log = logging.getLogger(__name__)

WIRE_VERSION = 1
ROLES = ("policy", "reward", "progress", "action", "reflection", "reflector", "recovery")
ENV_ENDPOINT = "ROBUSTSYNTH_JUDGE_ENDPOINT"


@dataclass
class RemoteConfig:
    endpoint: str
    timeout: float = 30.0
    retries: int = 3
    backoff: float = 0.5
    max_backoff: float = 8.0
    max_inflight: int = 8

    @classmethod
    def from_mapping(cls, d: Optional[Mapping[str, Any]] = None, role: Optional[str] = None) -> "RemoteConfig":
        """Config-file values, overridden by environment variables.

        ``ROBUSTSYNTH_JUDGE_ENDPOINT_<ROLE>`` beats ``ROBUSTSYNTH_JUDGE_ENDPOINT``
        which beats the file.
        """
        d = dict(d or {})
        endpoint = d.get("endpoint", "")
        endpoint = os.environ.get(ENV_ENDPOINT, endpoint)
        if role:
            endpoint = os.environ.get(f"{ENV_ENDPOINT}_{role.upper()}", endpoint)
        if not endpoint:
            from ..errors import ConfigurationError

            raise ConfigurationError("no remote judge endpoint configured")
        return cls(endpoint=endpoint.rstrip("/"), timeout=float(d.get("timeout", 30.0)),
                   retries=int(d.get("retries", 3)), backoff=float(d.get("backoff", 0.5)),
                   max_backoff=float(d.get("max_backoff", 8.0)), max_inflight=int(d.get("max_inflight", 8)))


class RemoteClient:
    def __init__(self, config: RemoteConfig, session: Optional[requests.Session] = None):
        self.config = config
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max(1, config.max_inflight))
        self.attempts = 0

    def invoke(self, role: str, request: Mapping[str, Any]) -> Dict[str, Any]:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        body = {"version": WIRE_VERSION, "role": role, "request": request}
        url = f"{self.config.endpoint}/{role}"
        last: Optional[str] = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                time.sleep(min(self.config.backoff * 2 ** (attempt - 1), self.config.max_backoff))
            self.attempts += 1
            with self._slots:
                try:
                    resp = self.session.post(url, json=body, timeout=self.config.timeout)
                except requests.RequestException as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    log.warning("remote %s attempt %d failed: %s", role, attempt + 1, last)
                    continue
            if not 200 <= resp.status_code < 300:
                last = f"HTTP {resp.status_code}"
                log.warning("remote %s attempt %d: %s", role, attempt + 1, last)
                continue
            try:
                data = resp.json()
            except ValueError:
                last = "response is not JSON"
                continue
            if not isinstance(data, dict):
                last = "response is not an object"
                continue
            return data
        raise JudgeUnavailable(f"{role} judge unavailable after {self.config.retries + 1} attempts: {last}")


def obs_wire(obs: Observation) -> dict:
    return {"state_hash": obs.state_hash, "widgets": [list(w) for w in obs.widgets],
            "screen_note": obs.screen_note}


def history_wire(history: Sequence[HistoryStep]) -> list:
    return [{"observation": obs_wire(h.observation), "output": h.output, "action": canonical(h.action)}
            for h in history]


def _task_text(u) -> str:
    return getattr(u, "instruction", u)


def _int01(data: Mapping, key: str, role: str) -> int:
    v = data.get(key)
    if isinstance(v, bool) or v not in (0, 1):
        raise JudgeUnavailable(f"{role} response lacks a 0/1 field {key!r}")
    return int(v)


class RemoteJudge:
    """Reward role.  Reads ``r`` and optional ``experience``."""

    def __init__(self, client: RemoteClient):
        self.client = client

    def judge_trajectory(self, u, observations: Sequence[Observation], actions: Sequence[Action]) -> RewardVerdict:
        data = self.client.invoke("reward", {"task": _task_text(u),
                                             "observations": [obs_wire(o) for o in observations],
                                             "actions": [canonical(a) for a in actions]})
        r = _int01(data, "r", "reward")
        exp = data.get("experience") or {}
        if not isinstance(exp, dict):
            raise JudgeUnavailable("reward response has a malformed experience")
        return RewardVerdict(r, TrajectoryExperience.from_dict(exp))


class RemoteProgressCritic:
    """Progress role.  Reads ``c`` and ``reason``."""

    def __init__(self, client: RemoteClient):
        self.client = client

    def assess_progress(self, u, obs, action, history=()) -> ProgressVerdict:
        data = self.client.invoke("progress", {"task": _task_text(u), "observation": obs_wire(obs),
                                               "action": canonical(action), "history": history_wire(history)})
        return ProgressVerdict(_int01(data, "c", "progress"), str(data.get("reason", "")))


class RemoteActionCritic:
    """Action role.  Reads ``verify``."""

    def __init__(self, client: RemoteClient):
        self.client = client

    def verify_action(self, obs, action, next_obs) -> int:
        data = self.client.invoke("action", {"observation": obs_wire(obs), "action": canonical(action),
                                             "next_observation": obs_wire(next_obs)})
        return _int01(data, "verify", "action")


class RemoteReflection:
    """Reflection role.  Reads ``reflection``."""

    def __init__(self, client: RemoteClient):
        self.client = client

    def __call__(self, u, history, step_output: str) -> int:
        data = self.client.invoke("reflection", {"task": _task_text(u), "history": history_wire(history or ()),
                                                 "output": step_output})
        return _int01(data, "reflection", "reflection")


class RemoteAgent:
    """Policy role.  Reads ``thought`` and ``action`` (canonical text)."""

    def __init__(self, client: RemoteClient, name: str = "remote"):
        self.client = client
        self.policy_id = name

    def propose(self, u, obs, history, rng=None) -> Proposal:
        data = self.client.invoke("policy", {"task": _task_text(u), "observation": obs_wire(obs),
                                             "history": history_wire(history)})
        try:
            action = parse(str(data.get("action", "")))
        except ActionParseError as exc:
            raise JudgeUnavailable(f"policy response has no canonical action: {exc}") from exc
        return Proposal(str(data.get("thought", "")), action)

    def propose_action(self, u, obs, history, rng=None):
        p = self.propose(u, obs, history, rng)
        return p.thought, p.action


def remote_invoke(role: str, request: Mapping[str, Any], config: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    return RemoteClient(RemoteConfig.from_mapping(config, role)).invoke(role, request)
