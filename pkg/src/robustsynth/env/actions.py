"""Agent actions and their one-line canonical text form.

Grammar (no whitespace outside quoted text)::

    CLICK(<widget_id>)
    TYPE(<json string>)
    HOTKEY(<key>,<key>,...)
    SCROLL(<up|down>,<amount>)
    TERMINATE(<success|failure>)
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Tuple, Union

_IDENT = re.compile(r"^[A-Za-z0-9_.~@+\-]+$")
_CALL = re.compile(r"^(CLICK|TYPE|HOTKEY|SCROLL|TERMINATE)\((.*)\)$", re.S)
# Finds canonical actions embedded in free text (used to read guidance).
ACTION_PATTERN = re.compile(
    r"(CLICK\([A-Za-z0-9_.~@+\-]+\)|TYPE\(\"(?:[^\"\\]|\\.)*\"\)|HOTKEY\([A-Za-z0-9_+,\-]+\)"
    r"|SCROLL\((?:up|down),\d+\)|TERMINATE\((?:success|failure)\))"
)


class ActionParseError(ValueError):
    pass


@dataclass(frozen=True)
class Click:
    widget_id: str


@dataclass(frozen=True)
class Type:
    text: str


@dataclass(frozen=True)
class Hotkey:
    keys: Tuple[str, ...]


@dataclass(frozen=True)
class Scroll:
    direction: str
    amount: int


@dataclass(frozen=True)
class Terminate:
    status: str


Action = Union[Click, Type, Hotkey, Scroll, Terminate]


def _check_ident(value: str, what: str) -> str:
    if not _IDENT.match(value):
        raise ActionParseError(f"invalid {what}: {value!r}")
    return value


def canonical(action: Action) -> str:
    if isinstance(action, Click):
        return f"CLICK({_check_ident(action.widget_id, 'widget id')})"
    if isinstance(action, Type):
        return "TYPE(" + json.dumps(action.text, ensure_ascii=False) + ")"
    if isinstance(action, Hotkey):
        if not action.keys:
            raise ActionParseError("hotkey needs at least one key")
        return "HOTKEY(" + ",".join(_check_ident(k, "key") for k in action.keys) + ")"
    if isinstance(action, Scroll):
        if action.direction not in ("up", "down") or action.amount < 0:
            raise ActionParseError(f"invalid scroll {action!r}")
        return f"SCROLL({action.direction},{int(action.amount)})"
    if isinstance(action, Terminate):
        if action.status not in ("success", "failure"):
            raise ActionParseError(f"invalid terminate status {action.status!r}")
        return f"TERMINATE({action.status})"
    raise TypeError(f"not an action: {action!r}")


def parse(text: str) -> Action:
    m = _CALL.match(text)
    if not m:
        raise ActionParseError(f"not a canonical action: {text!r}")
    verb, body = m.groups()
    if verb == "CLICK":
        action: Action = Click(_check_ident(body, "widget id"))
    elif verb == "TYPE":
        try:
            value = json.loads(body)
        except json.JSONDecodeError as exc:
            raise ActionParseError(f"bad TYPE payload: {body!r}") from exc
        if not isinstance(value, str):
            raise ActionParseError("TYPE payload must be a string")
        action = Type(value)
    elif verb == "HOTKEY":
        action = Hotkey(tuple(_check_ident(k, "key") for k in body.split(",")))
    elif verb == "SCROLL":
        parts = body.split(",")
        if len(parts) != 2 or not parts[1].isdigit():
            raise ActionParseError(f"bad SCROLL args: {body!r}")
        action = Scroll(parts[0], int(parts[1]))
    else:
        action = Terminate(body)
    # Reject non-canonical spellings such as leading zeros in SCROLL amounts.
    if canonical(action) != text:
        raise ActionParseError(f"non-canonical spelling: {text!r}")
    return action


def find_action(text: str) -> Action | None:
    """Return the last canonical action embedded in ``text``, if any."""
    found = None
    for m in ACTION_PATTERN.finditer(text):
        try:
            found = parse(m.group(0))
        except ActionParseError:
            continue
    return found
