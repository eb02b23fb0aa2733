from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrnn import autodiff as ad
from rrnn.cell import CellTree, TreeNode
from rrnn.oracles import brute_tree_distance, brute_vector_difference, random_tree
from rrnn.reference import GRU_NAMES, GRU_SKELETON, gru_target_tree, random_weights
from rrnn.tree_loss import (IndexedTree, LossConfig, LossConfigError, isomorphism_class,
                            l2_penalty, margin_terms, score_margin, subtree, total_loss,
                            tree_distance, vector_difference)


def _indexed(rng, n, p, integer=False):
    return IndexedTree.from_cell_tree(random_tree(rng, n, p, integer))


def partition_vd(t1: IndexedTree, t2: IndexedTree):
    """Three explicit sums over the index partitions."""
    a, b = set(t1.vectors), set(t2.vectors)
    both = sum(float(np.sum((t1.vectors[i] - t2.vectors[i]) ** 2)) for i in a & b)
    only1 = sum(float(np.sum(t1.vectors[i] ** 2)) for i in a - b)
    only2 = sum(float(np.sum(t2.vectors[i] ** 2)) for i in b - a)
    return both + only1 + only2


# ---------------------------------------------------------------- vector difference

def test_indexed_tree_requires_parents():
    with pytest.raises(ValueError):
        IndexedTree({1: np.zeros(2), 4: np.zeros(2)})


def test_vd_examples():
    t = IndexedTree({1: np.array([1.0, 0.0])})
    empty = IndexedTree({})
    assert vector_difference(t, empty) == 1.0
    assert vector_difference(t, t) == 0.0


def test_vd_partition_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t1, t2 = _indexed(rng, 3, 2), _indexed(rng, 3, 2)
        assert np.isclose(vector_difference(t1, t2), partition_vd(t1, t2), rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_vd_properties(seed):
    rng = np.random.default_rng(seed)
    t1 = random_tree(rng, int(rng.integers(1, 6)), 3, integer=True)
    t2 = random_tree(rng, int(rng.integers(1, 6)), 3, integer=True)
    i1, i2 = IndexedTree.from_cell_tree(t1), IndexedTree.from_cell_tree(t2)
    assert vector_difference(i1, i2) == vector_difference(i2, i1) >= 0
    assert vector_difference(i1, i1) == 0
    assert vector_difference(i1, i2) == brute_vector_difference(t1, t2)


def test_subtree_reindexes_from_one():
    t = IndexedTree({1: np.ones(1), 2: 2 * np.ones(1), 5: 5 * np.ones(1)})
    s = subtree(t, 2)
    assert s.indices == [1, 3] and s.vectors[3][0] == 5


# ---------------------------------------------------------------- tree distance

def test_td_single_nodes():
    v, w = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert tree_distance(IndexedTree({1: v}), IndexedTree({1: w})) == float(np.sum((v - w) ** 2))


def test_td_random_pairs_match_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = random_tree(rng, 4, 2)
        b = random_tree(rng, 3, 2)
        assert np.isclose(tree_distance(a, b), brute_tree_distance(a, b), rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_td_properties(seed):
    rng = np.random.default_rng(seed)
    a = random_tree(rng, int(rng.integers(1, 6)), 2, integer=True)
    b = random_tree(rng, int(rng.integers(1, 6)), 2, integer=True)
    assert tree_distance(a, a) == 0.0
    assert tree_distance(a, b) == brute_tree_distance(a, b) >= 0


def test_td_not_symmetric():
    rng = np.random.default_rng(2)
    gaps = [tree_distance(a, b) - tree_distance(b, a)
            for a, b in ((random_tree(rng, 4, 2), random_tree(rng, 1, 2)) for _ in range(10))]
    assert any(abs(g) > 1e-9 for g in gaps)


# ---------------------------------------------------------------- isomorphism classes

def _chain(commutative):
    v = [np.array([float(i)]) for i in range(1, 6)]
    nodes = [TreeNode(0, 1, "add", "identity", v[2], None, commutative[0]),
             TreeNode(3, 2, "add", "identity", v[3], None, commutative[1]),
             TreeNode(4, 3, "add", "identity", v[4], None, commutative[2])]
    return CellTree(["a", "b", "c"], v[:3], nodes, 5)


def test_iso_no_commutative_nodes():
    assert len(isomorphism_class(_chain([False] * 3))) == 1


def test_iso_two_commutative_nodes():
    iso = isomorphism_class(_chain([False, True, True]))
    assert len(iso) == 4 and not iso.truncated
    # a swap at a merge of two leaves leaves the internal labelling unchanged
    assert len(isomorphism_class(_chain([True, True, True]))) == 4
    small = isomorphism_class(_chain([True, True, True]), cap=3)
    assert len(small) == 3 and small.truncated


def _nested(skeleton, k):
    if k < 3:
        return None
    _, l, r, _, _ = skeleton[k - 3]
    return (k, _nested(skeleton, l), _nested(skeleton, r))


def _all_swaps(shape):
    """Every labelling reachable by independent child swaps, written as explicit recursion."""
    if shape is None:
        return [None]
    k, l, r = shape
    out = []
    for a, b in product(_all_swaps(l), _all_swaps(r)):
        out += [(k, a, b), (k, b, a)]
    return out


def _labels(shape, h=1, out=None):
    out = {} if out is None else out
    if shape is not None:
        out[h] = shape[0]
        _labels(shape[1], 2 * h, out)
        _labels(shape[2], 2 * h + 1, out)
    return out


def test_gru_iso_class_size_matches_enumeration():
    rng = np.random.default_rng(3)
    w = random_weights(GRU_NAMES, 3, rng)
    tree = gru_target_tree(w, rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3))
    root = _nested(GRU_SKELETON, tree.root)
    distinct = {tuple(sorted(_labels(s).items())) for s in _all_swaps(root)}
    iso = isomorphism_class(tree, cap=10_000)
    assert len(iso) == len(distinct) == 64
    orig = IndexedTree.from_cell_tree(tree)
    for t in iso:
        np.testing.assert_array_equal(t.vectors[1], orig.vectors[1])
        assert sorted(v.tobytes() for v in t.vectors.values()) == \
            sorted(v.tobytes() for v in orig.vectors.values())


# ---------------------------------------------------------------- margin

def test_margin_terms_exact():
    for M in (1.0, 0.5, 3.0, 0.1, 7.3):
        t = margin_terms(np.array([0.0, M / 2, M, 2 * M]), M)
        assert t.tolist() == [0.0, -0.5, -1.0, -1.0]


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(0, 1e4))
def test_margin_range_and_scale(M, gap):
    t = float(margin_terms(np.array([gap]), M)[0])
    assert -1.0 <= t <= 0.0
    if gap >= M:
        assert t == -1.0


def test_score_margin_sum_and_empty():
    assert score_margin([], 1.0) == 0.0
    pairs = [(np.float64(2.0), np.float64(1.5)), (np.float64(1.0), np.float64(-3.0))]
    assert float(score_margin(pairs, 1.0)) == -1.5


def test_margin_gradient_routes_below_M():
    tape = ad.Tape()
    g = tape.leaf([0.2, 1.5])
    d = ad.backward(ad.sum_(margin_terms(g, 1.0)))
    np.testing.assert_array_equal(d[g.id], [-1.0, 0.0])


def test_loss_config_validation():
    with pytest.raises(LossConfigError):
        LossConfig(lambda2=-1)
    with pytest.raises(LossConfigError):
        LossConfig(margin=0)
    with pytest.raises(LossConfigError):
        LossConfig(iso_aggregation="max")


# ---------------------------------------------------------------- total loss

def test_total_loss_task_only():
    params = {"w": np.array([3.0, 4.0])}
    parts = total_loss(np.float64(1.25), np.float64(9.0), np.float64(-2.0), params,
                       LossConfig(1.0, 0.0, 0.0, 0.0))
    assert float(parts.total) == 1.25


def test_total_loss_zero_for_matching_trees():
    rng = np.random.default_rng(4)
    t = random_tree(rng, 4, 3)
    parts = total_loss(np.float64(0.7), np.float64(tree_distance(t, t)), np.float64(-1.0),
                       {"w": np.ones(2)}, LossConfig(0.0, 1.0, 0.0, 0.0))
    assert float(parts.total) == 0.0


def test_total_loss_two_step_assembly():
    rng = np.random.default_rng(5)
    cfg = LossConfig(0.9, 0.3, 0.2, 0.01, margin=0.5)
    params = {"L": rng.normal(size=(2, 2, 2)), "b": rng.normal(size=(2, 2))}
    logits = [rng.normal(size=4) for _ in range(2)]
    ys = [1, 3]
    preds = [random_tree(rng, 3, 2) for _ in range(2)]
    tgts = [random_tree(rng, 2, 2) for _ in range(2)]
    pairs = [[(np.float64(1.0), np.float64(0.8))], [(np.float64(0.4), np.float64(-0.9))]]
    task = sum(ad.cross_entropy(z, y) for z, y in zip(logits, ys))
    tree = sum(tree_distance(p, t) for p, t in zip(preds, tgts))
    margin = sum(score_margin(pr, cfg.margin) for pr in pairs)
    got = float(total_loss(task, tree, margin, params, cfg).total)
    # oracle: every term by hand
    ce = sum(np.log(np.exp(z).sum()) - z[y] for z, y in zip(logits, ys))
    td = sum(brute_tree_distance(p, t) for p, t in zip(preds, tgts))
    mg = -min(0.5, 0.2) / 0.5 - min(0.5, 1.3) / 0.5
    l2 = sum(float(np.sum(v ** 2)) for v in params.values())
    want = 0.9 * ce + 0.3 * td + 0.2 * mg + 0.01 * l2
    assert np.isclose(got, want, rtol=1e-12)
    assert np.isclose(float(l2_penalty(params)), l2, rtol=1e-15)
