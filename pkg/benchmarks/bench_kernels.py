"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py --docs 1000 --repeat 3

Both variants are called on the same inputs and their outputs are checked
for equality before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from robustsynth import _kernels as K
from robustsynth.dataset.minhash import MinHasher


def corpus(n_docs: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(400)]
    base = [" ".join(rng.choice(vocab, size=40)) for _ in range(max(1, n_docs // 4))]
    docs = []
    for i in range(n_docs):
        toks = base[i % len(base)].split()
        for j in rng.choice(len(toks), size=int(rng.integers(0, 12)), replace=False):
            toks[j] = str(rng.choice(vocab))
        docs.append(" ".join(toks))
    return docs


def best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--docs", type=int, default=1000)
    ap.add_argument("--arms", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1

    sigs = MinHasher().signatures(corpus(args.docs, args.seed))
    rng = np.random.default_rng(args.seed)
    base = rng.random(args.arms)
    vn = rng.integers(0, 20, args.arms).astype(np.float64)
    vp = vn + rng.integers(0, 20, args.arms)
    pairs = [(sigs[i], sigs[(i * 7 + 1) % len(sigs)]) for i in range(len(sigs))]

    cases = [
        ("sketch_similarity x%d" % len(pairs),
         lambda: [K.np_sketch_similarity(a, b) for a, b in pairs],
         lambda: [K.nb_sketch_similarity(a, b) for a, b in pairs]),
        ("greedy_cluster %d docs" % len(sigs),
         lambda: K.np_greedy_cluster(sigs, 0.85),
         lambda: K.nb_greedy_cluster(sigs, 0.85)),
        ("ucb_argmax %d arms" % args.arms,
         lambda: K.np_ucb_argmax(base, vn, vp, 0.25),
         lambda: K.nb_ucb_argmax(base, vn, vp, 0.25)),
    ]
    print(f"{'kernel':34s}{'numpy s':>12s}{'numba s':>12s}{'speedup':>10s}")
    for name, f_np, f_nb in cases:
        a, b = f_np(), f_nb()  # also warms up the jit
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            print(f"{name}: outputs differ")
            return 1
        t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        print(f"{name:34s}{t_np:12.4f}{t_nb:12.4f}{t_np / max(t_nb, 1e-9):9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
