"""Composite training loss: task term, tree distance, score margin, L2.

Trees are compared through heap indexing (root 1, children ``2i`` and
``2i + 1``).  The tree distance is compiled once per pair of shapes into a
sparse linear map from pairwise squared distances to every subtree
comparison, so batched evaluation on the tape is a handful of ops.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .cell import CellTree


class LossConfigError(ValueError):
    pass


@dataclass
class IndexedTree:
    """Heap index -> vector for internal nodes; ``keys`` name the source node of each index."""

    vectors: dict
    keys: dict | None = None

    def __post_init__(self):
        for i in self.vectors:
            if i > 1 and i // 2 not in self.vectors:
                raise ValueError(f"index {i} present without parent {i // 2}")

    @property
    def indices(self):
        return sorted(self.vectors)

    @classmethod
    def from_cell_tree(cls, tree: CellTree):
        hm = tree.heap_map()
        return cls({h: np.asarray(ad.value_of(tree.value(k))) for h, k in hm.items()}, dict(hm))


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1e-8
    lambda4: float = 3e-3
    margin: float = 1.0
    iso_aggregation: str = "min"
    iso_cap: int = 64

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise LossConfigError(f"{name} must be nonnegative")
        if not self.margin > 0:
            raise LossConfigError("margin M must be positive")
        if self.iso_aggregation not in ("min", "mean"):
            raise LossConfigError("iso_aggregation must be 'min' or 'mean'")


def vector_difference(t1: IndexedTree, t2: IndexedTree) -> float:
    total = 0.0
    for i in set(t1.vectors) | set(t2.vectors):
        a, b = t1.vectors.get(i), t2.vectors.get(i)
        d = (a - b) if a is not None and b is not None else (a if b is None else b)
        total += float(np.dot(d, d))
    return total


def subtree_indices(indices, root: int) -> dict[int, int]:
    """Relative index (own root = 1) -> absolute index for the subtree at ``root``."""
    present = set(indices)
    out, stack = {}, [(root, 1)]
    while stack:
        a, r = stack.pop()
        if a not in present:
            continue
        out[r] = a
        stack += [(2 * a, 2 * r), (2 * a + 1, 2 * r + 1)]
    return out


def subtree(tree: IndexedTree, root: int) -> IndexedTree:
    rel = subtree_indices(tree.indices, root)
    keys = None if tree.keys is None else {r: tree.keys[a] for r, a in rel.items()}
    return IndexedTree({r: tree.vectors[a] for r, a in rel.items()}, keys)


@dataclass(frozen=True)
class TDProgram:
    """Sparse map from features ``[D.ravel(), |pred|^2, |tgt|^2]`` to all subtree VDs.

    ``pred_slots``/``tgt_slots`` are the node slots of the stacked vectors; a
    target variant is a heap -> slot map, so several isomorphic variants can
    share one stack of target vectors.
    """

    n_pred: int
    n_tgt: int
    n_var: int
    n_sub_pred: int
    n_sub_tgt: int
    matrix: sp.csr_matrix
    matrix_t: sp.csr_matrix


def compile_td(pred_map: tuple, variants: tuple) -> TDProgram:
    """``pred_map`` and each variant are tuples of (heap index, slot) pairs."""
    pred = dict(pred_map)
    n_pred = max(pred.values()) + 1
    n_tgt = max(max(dict(v).values()) for v in variants) + 1
    n_feat = n_pred * n_tgt + n_pred + n_tgt
    pred_subs = [subtree_indices(pred, n1) for n1 in sorted(pred)]
    rows, cols = [], []
    col = 0
    n_sub_tgt = None
    for var in variants:
        tgt = dict(var)
        tgt_subs = [subtree_indices(tgt, n2) for n2 in sorted(tgt)]
        if n_sub_tgt is None:
            n_sub_tgt = len(tgt_subs)
        elif n_sub_tgt != len(tgt_subs):
            raise ValueError("isomorphic variants must have equal internal node counts")
        for ps in pred_subs:
            for ts in tgt_subs:
                for r in set(ps) | set(ts):
                    a, b = ps.get(r), ts.get(r)
                    if a is not None and b is not None:
                        f = pred[a] * n_tgt + tgt[b]
                    elif b is None:
                        f = n_pred * n_tgt + pred[a]
                    else:
                        f = n_pred * n_tgt + n_pred + tgt[b]
                    rows.append(f)
                    cols.append(col)
                col += 1
    M = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_feat, col))
    return TDProgram(n_pred, n_tgt, len(variants), len(pred_subs), n_sub_tgt, M, M.T.tocsr())


_compile_cached = lru_cache(maxsize=256)(compile_td)


def _sparse_right(F, prog: TDProgram):
    M, Mt = prog.matrix, prog.matrix_t

    def fn(f):
        return np.asarray((Mt @ f.T).T)

    def vjp(g, f):
        return (np.asarray((M @ g.T).T),)
    return ad.custom("td-sparse", fn, vjp, F)


def td_features(pred, tgt):
    """Stacks ``(B, n_pred, p)``, ``(B, n_tgt, p)`` -> ``(B, n_feat)``."""
    P, Tg = ad.value_of(pred), ad.value_of(tgt)
    B, n1, p = P.shape
    n2 = Tg.shape[1]
    diff = ad.sub(ad.reshape(pred, (B, n1, 1, p)), ad.reshape(tgt, (B, 1, n2, p)))
    D = ad.sum_(ad.square(diff), axis=-1)
    na = ad.sum_(ad.square(pred), axis=-1)
    nt = ad.sum_(ad.square(tgt), axis=-1)
    return ad.concat([ad.reshape(D, (B, n1 * n2)), na, nt], axis=-1)


def td_apply(pred, tgt, prog: TDProgram, aggregation="min"):
    """Batched tree distance, aggregated over target variants.  Returns ``(B,)``."""
    F = td_features(pred, tgt)
    B = np.shape(ad.value_of(F))[0]
    vd = ad.reshape(_sparse_right(F, prog), (B, prog.n_var, prog.n_sub_pred, prog.n_sub_tgt))
    per_var = ad.sum_(ad.amin(vd, axis=-1), axis=-1)
    if aggregation == "min":
        return ad.amin(per_var, axis=-1)
    return ad.mean(per_var, axis=-1)


def _stack_tree(t: IndexedTree, slot_of):
    inv = {s: t.vectors[h] for h, s in slot_of.items()}
    return np.stack([inv[s] for s in range(len(inv))])


def tree_distance_indexed(pred: IndexedTree, target: IndexedTree) -> float:
    pmap = {h: s for s, h in enumerate(pred.indices)}
    tmap = {h: s for s, h in enumerate(target.indices)}
    prog = _compile_cached(tuple(sorted(pmap.items())), (tuple(sorted(tmap.items())),))
    P = _stack_tree(pred, pmap)[None]
    T = _stack_tree(target, tmap)[None]
    return float(td_apply(P, T, prog)[0])


def tree_distance(pred, target) -> float:
    """Sum over predicted internal nodes of the closest target subtree's VD."""
    p = pred if isinstance(pred, IndexedTree) else IndexedTree.from_cell_tree(pred)
    t = target if isinstance(target, IndexedTree) else IndexedTree.from_cell_tree(target)
    if not p.vectors or not t.vectors:
        raise ValueError("both trees need at least one internal node")
    return tree_distance_indexed(p, t)


# ---------------------------------------------------------------- isomorphisms

@dataclass
class IsoClass:
    trees: list
    truncated: bool = False

    def __len__(self):
        return len(self.trees)

    def __iter__(self):
        return iter(self.trees)


def _variants(tree: CellTree, k: int):
    """Yield nested (k, left, right) shapes over child swaps at commutative nodes."""
    if tree.is_leaf(k):
        yield None
        return
    nd = tree.node(k)
    for lv, rv in product(list(_variants(tree, nd.left)), list(_variants(tree, nd.right))):
        yield (k, (nd.left, lv), (nd.right, rv))
        if nd.commutative:
            yield (k, (nd.right, rv), (nd.left, lv))


def _heap_keys(shape, h=1, out=None):
    out = {} if out is None else out
    if shape is None:
        return out
    k, (_, lv), (_, rv) = shape
    out[h] = k
    _heap_keys(lv, 2 * h, out)
    _heap_keys(rv, 2 * h + 1, out)
    return out


def isomorphism_class(target: CellTree, cap: int = 64) -> IsoClass:
    """Distinct heap labellings reachable by swapping children of commutative nodes."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    seen, trees = set(), []
    for shape in _variants(target, target.root):
        keys = _heap_keys(shape)
        vecs = {h: np.asarray(ad.value_of(target.value(k))) for h, k in keys.items()}
        sig = tuple((h, vecs[h].tobytes()) for h in sorted(vecs))
        if sig in seen:
            continue
        if len(trees) == cap:
            return IsoClass(trees, True)
        seen.add(sig)
        trees.append(IndexedTree(vecs, keys))
    return IsoClass(trees, False)


def iso_variant_maps(target: CellTree, cap: int = 64):
    """Structure-only variants (heap -> pool index), ignoring values; used for compiled TD."""
    seen, maps = set(), []
    for shape in _variants(target, target.root):
        keys = tuple(sorted(_heap_keys(shape).items()))
        if keys in seen:
            continue
        seen.add(keys)
        maps.append(keys)
        if len(maps) == cap:
            break
    return maps


# ---------------------------------------------------------------- margin and total

def margin_terms(gaps, M: float):
    """Per-selection terms ``-(1/M) min(M, gap)``; works on arrays or Vars."""
    if not M > 0:
        raise LossConfigError("margin M must be positive")
    # divide rather than multiply by 1/M so gap = M/2 lands on exactly -1/2
    return ad.custom("margin", lambda g: 0.0 - np.minimum(g, M) / M,
                     lambda out, g: (np.where(g < M, -out / M, 0.0),), gaps)


def score_margin(pairs, M: float):
    """Sum of margin terms over (score c*, score c**) pairs; 0 for no pairs."""
    if not pairs:
        return 0.0
    gaps = ad.stack([ad.sub(a, b) for a, b in pairs])
    return ad.sum_(margin_terms(gaps, M))


def l2_penalty(params, names=None):
    names = sorted(params) if names is None else names
    terms = [ad.sum_(ad.square(params[n])) for n in names]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


@dataclass
class LossParts:
    total: object
    task: float
    tree: float
    margin: float
    l2: float
    extras: dict = field(default_factory=dict)


def total_loss(task, tree_terms, margin, params, cfg: LossConfig, l2_names=None) -> LossParts:
    """``l1*task + l2*tree + l3*margin + l4*sum |phi|^2`` with each part pre-summed."""
    l2 = l2_penalty(params, l2_names)
    total = ad.add(ad.add(ad.scale(task, cfg.lambda1), ad.scale(tree_terms, cfg.lambda2)),
                   ad.add(ad.scale(margin, cfg.lambda3), ad.scale(l2, cfg.lambda4)))
    f = lambda x: float(np.sum(ad.value_of(x)))  # noqa: E731
    return LossParts(total, f(task), f(tree_terms), f(margin), f(l2))
