"""Hot loops: bottom-k sketch similarity, greedy clustering and UCB argmax.

Each kernel has a numba version and a plain numpy version with identical
results.  Numba is used when importable unless ``ROBUSTSYNTH_NO_NUMBA=1``.
"""

from __future__ import annotations

import os

import numpy as np

SENTINEL = np.uint64(0xFFFFFFFFFFFFFFFF)


def _numba_requested() -> bool:
    return os.environ.get("ROBUSTSYNTH_NO_NUMBA", "").strip().lower() not in ("1", "true", "yes")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations


def np_sketch_similarity(a: np.ndarray, b: np.ndarray) -> float:
    va = a[a != SENTINEL]
    vb = b[b != SENTINEL]
    u = np.union1d(va, vb)[: a.shape[0]]
    if u.size == 0:
        return 1.0
    both = np.isin(u, va, assume_unique=True) & np.isin(u, vb, assume_unique=True)
    return float(both.sum()) / float(u.size)


def np_greedy_cluster(sigs: np.ndarray, threshold: float) -> np.ndarray:
    n = sigs.shape[0]
    assign = np.empty(n, dtype=np.int64)
    reps = []
    for i in range(n):
        assign[i] = i
        for r in reps:
            if np_sketch_similarity(sigs[i], sigs[r]) >= threshold:
                assign[i] = r
                break
        else:
            reps.append(i)
    return assign


def np_ucb_scores(base: np.ndarray, v_node: np.ndarray, v_parent: np.ndarray, c: float) -> np.ndarray:
    return base + c * np.sqrt(np.log(v_parent + 1.0) / (v_node + 1.0))


def np_ucb_argmax(base: np.ndarray, v_node: np.ndarray, v_parent: np.ndarray, c: float) -> int:
    # np.argmax returns the first maximum, so the lowest index wins ties
    return int(np.argmax(np_ucb_scores(base, v_node, v_parent, c)))


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def nb_sketch_similarity(a, b):
        k = a.shape[0]
        i = 0
        j = 0
        seen = 0
        shared = 0
        while seen < k:
            x = a[i] if i < k else SENTINEL
            y = b[j] if j < k else SENTINEL
            if x == SENTINEL and y == SENTINEL:
                break
            if x == y:
                shared += 1
                i += 1
                j += 1
            elif x < y:
                i += 1
            else:
                j += 1
            seen += 1
        if seen == 0:
            return 1.0
        return shared / seen

    @numba.njit(cache=True)
    def nb_greedy_cluster(sigs, threshold):
        n = sigs.shape[0]
        assign = np.empty(n, dtype=np.int64)
        reps = np.empty(n, dtype=np.int64)
        n_reps = 0
        for i in range(n):
            assign[i] = i
            found = False
            for t in range(n_reps):
                r = reps[t]
                if nb_sketch_similarity(sigs[i], sigs[r]) >= threshold:
                    assign[i] = r
                    found = True
                    break
            if not found:
                reps[n_reps] = i
                n_reps += 1
        return assign

    @numba.njit(cache=True)
    def nb_ucb_argmax(base, v_node, v_parent, c):
        best = -1
        best_score = -np.inf
        for i in range(base.shape[0]):
            s = base[i] + c * np.sqrt(np.log(v_parent[i] + 1.0) / (v_node[i] + 1.0))
            if s > best_score:
                best_score = s
                best = i
        return best

else:  # pragma: no cover
    nb_sketch_similarity = np_sketch_similarity
    nb_greedy_cluster = np_greedy_cluster
    nb_ucb_argmax = np_ucb_argmax


USE_NUMBA = HAVE_NUMBA and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    sketch_similarity = nb_sketch_similarity
    greedy_cluster = nb_greedy_cluster
    _ucb_argmax = nb_ucb_argmax
else:
    sketch_similarity = np_sketch_similarity
    greedy_cluster = np_greedy_cluster
    _ucb_argmax = np_ucb_argmax


def ucb_argmax(base, v_node, v_parent, c: float) -> int:
    base = np.asarray(base, dtype=np.float64)
    if base.size == 0:
        raise ValueError("no arms to choose from")
    return int(_ucb_argmax(base, np.asarray(v_node, dtype=np.float64),
                           np.asarray(v_parent, dtype=np.float64), float(c)))
