"""Bottom-k MinHash sketches over token n-grams.

One keyed 64-bit hash is applied to every n-gram and the ``k`` smallest
distinct values are kept (padded with ``SENTINEL``).  Similarity is the
share of the ``k`` smallest values of the union that occur in both
sketches, which is exact whenever the union has at most ``k`` n-grams.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Set, Tuple

import numpy as np

from .. import _kernels
from .._kernels import SENTINEL

_TOKEN = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def shingles(text: str, n: int) -> Set[Tuple[str, ...]]:
    toks = tokenize(text)
    if not toks:
        return set()
    if len(toks) < n:
        return {tuple(toks)}
    return {tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)}


def exact_jaccard(a: str, b: str, n: int = 3) -> float:
    sa, sb = shingles(a, n), shingles(b, n)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


@dataclass(frozen=True)
class MinHasher:
    n: int = 3
    k: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1 or self.k < 16:
            raise ValueError("need n >= 1 and k >= 16")

    def _hash(self, gram: Tuple[str, ...]) -> int:
        key = self.seed.to_bytes(8, "little", signed=False)
        h = hashlib.blake2b("\x1f".join(gram).encode("utf-8"), digest_size=8, key=key)
        v = int.from_bytes(h.digest(), "little")
        return v if v != int(SENTINEL) else v - 1

    def signature(self, text: str) -> np.ndarray:
        vals = sorted({self._hash(g) for g in shingles(text, self.n)})[: self.k]
        sig = np.full(self.k, SENTINEL, dtype=np.uint64)
        sig[: len(vals)] = np.asarray(vals, dtype=np.uint64)
        return sig

    def signatures(self, texts: Iterable[str]) -> np.ndarray:
        rows = [self.signature(t) for t in texts]
        if not rows:
            return np.empty((0, self.k), dtype=np.uint64)
        return np.stack(rows)

    @staticmethod
    def similarity(a: np.ndarray, b: np.ndarray) -> float:
        return float(_kernels.sketch_similarity(a, b))


def greedy_representatives(sigs: np.ndarray, threshold: float) -> np.ndarray:
    """Index of the representative each row joined (itself if it became one)."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    if sigs.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    return np.asarray(_kernels.greedy_cluster(np.ascontiguousarray(sigs), float(threshold)))
