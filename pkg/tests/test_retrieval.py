import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from posekit.errors import DegenerateEmbeddingError
from posekit.retrieval import (
    MatchSet,
    RetrievalConfig,
    hierarchical_retrieve,
    match_confidence_criterion,
    normalize_embedding,
    similarity_matrix,
    top_k_proposals,
)


def _matchset(confs):
    n = len(confs)
    pts = np.zeros((n, 2))
    return MatchSet(pts, pts, np.asarray(confs, dtype=float))


def test_normalize_3_4_5():
    assert np.allclose(normalize_embedding([3.0, 4.0]), [0.6, 0.8])


def test_normalize_idempotent():
    e = normalize_embedding([1.0, 2.0, 2.0])
    assert np.allclose(normalize_embedding(e), e)


def test_normalize_zero_vector():
    with pytest.raises(DegenerateEmbeddingError):
        normalize_embedding([0.0, 0.0])


def test_similarity_self_and_orthogonal():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    s = similarity_matrix([a], [a, b])
    assert s[0, 0] == pytest.approx(1.0)
    assert s[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_similarity_scale_invariance():
    rng = np.random.default_rng(0)
    prompts = [rng.normal(size=8) for _ in range(3)]
    props = [rng.normal(size=8) for _ in range(4)]
    s1 = similarity_matrix(prompts, props)
    s2 = similarity_matrix([7.3 * p for p in prompts], props)
    assert np.allclose(s1, s2)


def test_similarity_dimension_mismatch():
    with pytest.raises(ValueError):
        similarity_matrix([np.ones(3)], [np.ones(4)])
    with pytest.raises(ValueError):
        similarity_matrix([], [np.ones(4)])


def test_top_k_basic():
    assert top_k_proposals(np.array([0.9, 0.1, 0.5]), 2) == [0, 2]


def test_top_k_tie_breaks_to_smaller_index():
    assert top_k_proposals(np.array([0.5, 0.5]), 1) == [0]


def test_top_k_clamps():
    assert top_k_proposals(np.array([0.1, 0.9]), 5) == [1, 0]


def test_criterion_direct():
    assert match_confidence_criterion(_matchset([0.95, 0.85, 0.91]), 0.9) == pytest.approx(2 / 3)


def test_criterion_empty():
    assert match_confidence_criterion(_matchset([]), 0.9) == 0.0


def test_criterion_inclusive():
    assert match_confidence_criterion(_matchset([0.9, 0.9]), 0.9) == 1.0


def _brute_force(prompt, proposals, conf_sets, k, sigma):
    """Independent enumeration: raw cosines, slice top-k, argmax criterion."""
    sims = [
        float(np.dot(prompt, p) / (np.linalg.norm(prompt) * np.linalg.norm(p)))
        for p in proposals
    ]
    order = sorted(range(len(proposals)), key=lambda i: (-sims[i], i))[:k]

    def crit(i):
        c = conf_sets[i]
        return sum(1 for x in c if x >= sigma) / len(c) if len(c) else 0.0

    return max(order, key=lambda i: (crit(i), sims[i], -i))


def test_single_proposal_wins_regardless():
    rng = np.random.default_rng(1)
    res = hierarchical_retrieve(
        rng.normal(size=8),
        [rng.normal(size=8)],
        lambda i: _matchset([0.0]),
        RetrievalConfig(top_k=3, sigma=0.9),
    )
    assert res.best_index == 0


def test_matches_brute_force_restricted_argmax():
    rng = np.random.default_rng(2)
    for _ in range(50):
        prompt = rng.normal(size=16)
        proposals = [rng.normal(size=16) for _ in range(5)]
        conf_sets = [rng.uniform(0, 1, size=rng.integers(1, 30)) for _ in range(5)]
        cfg = RetrievalConfig(top_k=3, sigma=float(rng.uniform(0, 1)))
        res = hierarchical_retrieve(prompt, proposals, lambda i: _matchset(conf_sets[i]), cfg)
        assert res.best_index == _brute_force(prompt, proposals, conf_sets, cfg.top_k, cfg.sigma)


def test_equal_criteria_fall_back_to_similarity():
    rng = np.random.default_rng(3)
    prompt = rng.normal(size=8)
    proposals = [rng.normal(size=8) for _ in range(4)]
    res = hierarchical_retrieve(
        prompt, proposals, lambda i: _matchset([1.0]), RetrievalConfig(top_k=3)
    )
    sims = similarity_matrix([prompt], proposals)[0]
    assert res.best_index == int(np.argmax(sims))


def test_matcher_called_only_for_top_k():
    rng = np.random.default_rng(4)
    prompt = rng.normal(size=8)
    proposals = [rng.normal(size=8) for _ in range(6)]
    called = []

    def matcher(i):
        called.append(i)
        return _matchset([1.0])

    res = hierarchical_retrieve(prompt, proposals, matcher, RetrievalConfig(top_k=2))
    assert sorted(called) == sorted(top_k_proposals(similarity_matrix([prompt], proposals)[0], 2))
    assert res.criteria_scores.count(None) == 4


def test_matcher_failure_scores_zero():
    rng = np.random.default_rng(5)
    prompt = np.ones(4)
    good = prompt + 0.01 * rng.normal(size=4)
    other = rng.normal(size=4)

    def matcher(i):
        if i == 0:
            raise RuntimeError("matcher exploded")
        return _matchset([1.0, 1.0])

    res = hierarchical_retrieve(prompt, [good, other], matcher, RetrievalConfig(top_k=2))
    assert res.criteria_scores[0] == 0.0
    assert res.best_index == 1


def test_global_only_without_matcher():
    rng = np.random.default_rng(6)
    prompt = rng.normal(size=8)
    proposals = [rng.normal(size=8) for _ in range(5)]
    res = hierarchical_retrieve(prompt, proposals, None, RetrievalConfig(top_k=3))
    sims = similarity_matrix([prompt], proposals)[0]
    assert res.best_index == int(np.argmax(sims))
    assert all(s is None for s in res.criteria_scores)


# --- properties ---------------------------------------------------------------


@given(
    seed=st.integers(0, 10_000),
    scale=st.floats(min_value=1e-3, max_value=1e3),
    k=st.integers(1, 6),
)
def test_positive_scaling_never_changes_ranking(seed, scale, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 7))
    prompt = rng.normal(size=8)
    proposals = [rng.normal(size=8) for _ in range(n)]
    row1 = similarity_matrix([prompt], proposals)[0]
    row2 = similarity_matrix([prompt * scale], [p * scale for p in proposals])[0]
    assert top_k_proposals(row1, k) == top_k_proposals(row2, k)


@given(seed=st.integers(0, 10_000), s1=st.floats(0, 1), s2=st.floats(0, 1))
def test_criterion_monotone_in_sigma(seed, s1, s2):
    rng = np.random.default_rng(seed)
    ms = _matchset(rng.uniform(0, 1, size=rng.integers(1, 40)))
    lo, hi = min(s1, s2), max(s1, s2)
    assert match_confidence_criterion(ms, hi) <= match_confidence_criterion(ms, lo)


@given(seed=st.integers(0, 10_000), sigma=st.floats(0, 1))
def test_criterion_bounds_and_saturation(seed, sigma):
    rng = np.random.default_rng(seed)
    confs = rng.uniform(0, 1, size=rng.integers(1, 40))
    c = match_confidence_criterion(_matchset(confs), sigma)
    assert 0.0 <= c <= 1.0
    assert (c == 1.0) == bool(np.all(confs >= sigma))


@given(seed=st.integers(0, 10_000))
def test_full_top_k_equals_global_argmax(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    prompt = rng.normal(size=8)
    proposals = [rng.normal(size=8) for _ in range(n)]
    conf_sets = [rng.uniform(0, 1, size=rng.integers(1, 20)) for _ in range(n)]
    cfg = RetrievalConfig(top_k=n, sigma=0.9)
    res = hierarchical_retrieve(prompt, proposals, lambda i: _matchset(conf_sets[i]), cfg)
    assert res.best_index == _brute_force(prompt, proposals, conf_sets, n, 0.9)
