import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustsynth import _kernels as K
from robustsynth.dataset.minhash import MinHasher, exact_jaccard, greedy_representatives

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not importable")


def text_corpus(n, seed, lo=150, hi=400):
    """Mutated copies of a few base documents, long enough to overflow a 128-value sketch."""
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(300)]
    bases = [list(rng.choice(vocab, size=int(rng.integers(lo, hi)))) for _ in range(max(1, n // 10))]
    docs = []
    for i in range(n):
        toks = list(bases[i % len(bases)])
        rate = rng.uniform(0, 0.3)
        for j in np.flatnonzero(rng.random(len(toks)) < rate):
            toks[j] = str(rng.choice(vocab))
        docs.append(" ".join(toks))
    return docs


# -- backend selection -------------------------------------------------------

def test_backend_reflects_the_environment():
    expected = "numpy" if os.environ.get("ROBUSTSYNTH_NO_NUMBA") == "1" or not K.HAVE_NUMBA else "numba"
    assert K.BACKEND == expected


def test_env_flag_selects_numpy_fallback():
    env = dict(os.environ, ROBUSTSYNTH_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from robustsynth import _kernels as K; print(K.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


# -- numba and numpy agree ---------------------------------------------------

sketch_values = st.lists(st.integers(0, 50), max_size=16, unique=True)


def as_sig(vals, k=16):
    sig = np.full(k, K.SENTINEL, dtype=np.uint64)
    sig[: len(vals)] = np.asarray(sorted(vals), dtype=np.uint64)
    return sig


@needs_numba
@given(sketch_values, sketch_values)
@settings(max_examples=300, deadline=None)
def test_sketch_similarity_backends_agree(a, b):
    sa, sb = as_sig(a), as_sig(b)
    assert K.nb_sketch_similarity(sa, sb) == K.np_sketch_similarity(sa, sb)


@given(sketch_values, sketch_values)
@settings(max_examples=300, deadline=None)
def test_sketch_similarity_is_bottom_k_estimate(a, b):
    # brute force: k smallest of the union, fraction present in both sketches
    union = sorted(set(a) | set(b))[:16]
    want = 1.0 if not union else sum(1 for x in union if x in a and x in b) / len(union)
    assert K.sketch_similarity(as_sig(a), as_sig(b)) == pytest.approx(want, abs=0)


@needs_numba
@given(st.lists(sketch_values, min_size=1, max_size=12), st.sampled_from([0.3, 0.5, 0.85, 1.0]))
@settings(max_examples=150, deadline=None)
def test_greedy_cluster_backends_agree(rows, thr):
    sigs = np.stack([as_sig(r) for r in rows])
    assert np.array_equal(K.nb_greedy_cluster(sigs, thr), K.np_greedy_cluster(sigs, thr))


arms = st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.integers(0, 9), st.integers(0, 9)),
                min_size=1, max_size=30)


@needs_numba
@given(arms, st.sampled_from([0.0, 0.25, 1.0]))
@settings(max_examples=300, deadline=None)
def test_ucb_argmax_backends_agree(rows, c):
    base, vn, vp = (np.asarray(x, dtype=np.float64) for x in zip(*rows))
    assert K.nb_ucb_argmax(base, vn, vp, c) == K.np_ucb_argmax(base, vn, vp, c)


def test_ucb_argmax_first_of_tied_maxima():
    assert K.ucb_argmax([0.5, 0.9, 0.9, 0.1], [0, 0, 0, 0], [0, 0, 0, 0], 0.25) == 1


def test_ucb_argmax_mathematical_ties_keep_lowest_index():
    # ln(4)/2 equals ln(2)/1, so both arms score the same
    assert K.ucb_argmax([0.0, 0.0], [1, 0], [3, 1], 0.25) == 0
    assert K.ucb_argmax([0.0, 0.0], [0, 1], [1, 3], 0.25) == 0


def test_ucb_argmax_rejects_empty():
    with pytest.raises(ValueError):
        K.ucb_argmax([], [], [], 0.25)


# -- minhash -----------------------------------------------------------------

def test_identical_texts_collapse_to_one_representative():
    doc = text_corpus(1, 5)[0]
    reps = greedy_representatives(MinHasher().signatures([doc, doc]), 0.85)
    assert list(reps) == [0, 0]


def test_disjoint_texts_stay_apart():
    a = " ".join(f"a{i}" for i in range(200))
    b = " ".join(f"b{i}" for i in range(200))
    sigs = MinHasher().signatures([a, b])
    assert MinHasher.similarity(sigs[0], sigs[1]) == 0.0
    assert list(greedy_representatives(sigs, 0.85)) == [0, 1]


def test_short_texts_are_exact():
    # fewer shingles than sketch slots: the sketch holds the whole set
    a, b = "open the file menu and save", "open the file menu and quit"
    sigs = MinHasher().signatures([a, b])
    assert MinHasher.similarity(sigs[0], sigs[1]) == exact_jaccard(a, b)


def test_estimates_track_exact_jaccard_on_related_pairs():
    docs = text_corpus(120, 1)
    sigs = MinHasher().signatures(docs)
    errs = [abs(MinHasher.similarity(sigs[i], sigs[j]) - exact_jaccard(docs[i], docs[j]))
            for i in range(len(docs)) for j in range(i + 1, len(docs)) if i % 12 == j % 12]
    assert np.mean(errs) <= 0.05 and max(errs) <= 0.15


def test_signatures_are_deterministic_and_seeded():
    doc = text_corpus(1, 2)[0]
    assert np.array_equal(MinHasher().signature(doc), MinHasher().signature(doc))
    assert not np.array_equal(MinHasher(seed=1).signature(doc), MinHasher(seed=2).signature(doc))
