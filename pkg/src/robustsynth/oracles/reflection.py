"""Machine-checkable reflection marker.

A reflecting step carries ``REFLECT: <error target> | FIX: <plan>`` in its
thought.  Both parts must be non-empty: naming an error without a fix, or a
fix without an error, is not reflection.
"""

from __future__ import annotations

import re

# horizontal whitespace only, so an empty part cannot borrow the next line
_MARKER = re.compile(r"REFLECT:[ \t]*(?P<target>[^|\n]*?)[ \t]*\|[ \t]*FIX:[ \t]*(?P<fix>[^\n]*)")


def reflect_marker(error_target: str, fix: str) -> str:
    if not error_target.strip() or not fix.strip():
        raise ValueError("both an error target and a fix are required")
    return f"REFLECT: {error_target.strip()} | FIX: {fix.strip()}"


def has_reflection(text: str) -> bool:
    for m in _MARKER.finditer(text):
        if m.group("target").strip() and m.group("fix").strip():
            return True
    return False


def detect_reflection(u, history, step_output: str) -> int:
    return int(has_reflection(step_output))
