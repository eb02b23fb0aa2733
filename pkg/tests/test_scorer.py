import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrnn import autodiff as ad
from rrnn.oracles import central_difference
from rrnn.scorer import (NeuralScorer, RBFScorer, ScorerError, build_ordering_scorer,
                         min_half_sq_gap, wide_kernel_bound)


def alpha(v, anchors, sigma0_sq):
    """Closed-form kernel score with weights n, n-1, ..., 1, written out by hand."""
    n = len(anchors)
    return sum((n - k) * np.exp(-np.sum((v - a) ** 2) / (2 * sigma0_sq))
               for k, a in enumerate(anchors))


def test_rbf_single_anchor_scores_one():
    s = build_ordering_scorer(np.array([[0.3, -0.1]]))
    assert s.score(np.array([0.3, -0.1])) == 1.0


def test_two_basis_vectors():
    e = np.eye(2)
    s = build_ordering_scorer(e)
    a1, a2 = alpha(e[0], e, s.sigma0_sq), alpha(e[1], e, s.sigma0_sq)
    assert a1 > a2
    assert np.isclose(s.score(e[0]), a1, rtol=1e-15) and np.isclose(s.score(e[1]), a2, rtol=1e-15)


def test_three_anchors_descending():
    v = np.random.default_rng(0).normal(size=(3, 4))
    s = build_ordering_scorer(v)
    a = s.score(v)
    assert a[0] > a[1] > a[2]


@pytest.mark.parametrize("n", range(2, 9))
def test_ordering_property_100_sets(n):
    rng = np.random.default_rng(1000 + n)
    bad = 0
    for _ in range(100):
        v = rng.uniform(-1, 1, (n, int(rng.integers(1, 9))))
        s = build_ordering_scorer(v)
        direct = np.array([alpha(x, v, s.sigma0_sq) for x in v])
        bad += int(np.any(np.diff(direct) >= 0))
    assert bad == 0


def test_order_follows_list_not_content():
    v = np.random.default_rng(2).normal(size=(5, 3))
    perm = [3, 0, 4, 1, 2]
    a = build_ordering_scorer(v[perm]).score(v[perm])
    assert np.all(np.diff(a) < 0)


def test_duplicates_rejected():
    with pytest.raises(ScorerError):
        build_ordering_scorer(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ScorerError):
        RBFScorer(np.eye(2), 0.0)


def test_non_finite_input():
    with pytest.raises(ad.NumericError):
        build_ordering_scorer(np.eye(2)).score(np.array([np.nan, 0.0]))
    sc = NeuralScorer.from_params(NeuralScorer.init_params(2, 3, np.random.default_rng(0)))
    with pytest.raises(ad.NumericError):
        sc.score(np.array([np.inf, 0.0]))


def test_wide_bound_is_reported():
    v = np.eye(3)
    assert min_half_sq_gap(v) == 1.0
    assert np.isclose(wide_kernel_bound(v), 1.0 / (np.log(9) - np.log(8)))


def test_zero_weight_neural_scorer_returns_bias():
    sc = NeuralScorer(np.zeros((4, 5)), np.zeros(5), np.zeros(5), np.float64(0.37))
    for v in np.random.default_rng(3).normal(size=(6, 4)):
        assert sc.score(v) == 0.37


def test_neural_scorer_batched_matches_single():
    rng = np.random.default_rng(4)
    sc = NeuralScorer.from_params(NeuralScorer.init_params(3, 4, rng))
    V = rng.normal(size=(2, 5, 3))
    batch = sc.score(V)
    for i in range(2):
        for j in range(5):
            assert np.isclose(batch[i, j], sc.score(V[i, j]), rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_neural_scorer_gradient(seed):
    rng = np.random.default_rng(seed)
    params = NeuralScorer.init_params(4, 5, rng)
    v = rng.uniform(-1, 1, 4)
    tape = ad.Tape()
    bp = {k: tape.leaf(x) for k, x in params.items()}
    g = ad.backward(NeuralScorer.from_params(bp).score(v))
    fd = central_difference(lambda ps: float(NeuralScorer.from_params(ps).score(v)),
                            {k: x.copy() for k, x in params.items()}, list(params))
    for k in params:
        assert np.max(np.abs(g[bp[k].id] - fd[k])) <= 1e-5 * max(np.max(np.abs(fd[k])), 1e-3)


def test_score_is_pure():
    rng = np.random.default_rng(5)
    sc = NeuralScorer.from_params(NeuralScorer.init_params(3, 4, rng))
    v = rng.normal(size=3)
    assert sc.score(v) == sc.score(v)
    rb = build_ordering_scorer(rng.normal(size=(4, 3)))
    assert rb.score(v) == rb.score(v)
