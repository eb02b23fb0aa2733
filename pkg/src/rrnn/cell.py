"""Greedy scored construction of a per-timestep computational tree.

At each iteration every (weight tuple r, binary op o, activation u, pair
i < j) combination over the current node pool yields a candidate
``u(o(L_r c_i, R_r c_j) + b_r)``; the best-scoring candidate not already
generated joins the pool.  After ``iterations`` rounds the last winner is
the hidden state and the tree below it is the cell.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "one-minus": ad.one_minus,
    "identity": ad.identity,
}
BINARY_OPS = {"add": ad.add, "hadamard": ad.mul}

# sup_x |u'(x)|
ACTIVATION_SLOPE = {"sigmoid": 0.25, "tanh": 1.0, "one-minus": 1.0, "identity": 1.0}

SYMBOL = {"sigmoid": "sigma", "tanh": "tanh", "one-minus": "1-", "identity": "id",
          "add": "+", "hadamard": "*"}


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class OpCatalog:
    activations: tuple = ("sigmoid", "tanh", "one-minus", "identity")
    binary_ops: tuple = ("add", "hadamard")

    def __post_init__(self):
        if not self.activations or not self.binary_ops:
            raise BuildError("catalog needs at least one activation and one binary op")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise BuildError(f"unknown activation {a!r}")
        for o in self.binary_ops:
            if o not in BINARY_OPS:
                raise BuildError(f"unknown binary op {o!r}")


@dataclass
class LeafSets:
    """Leaf vectors of a cell: sample data, previous states, and constants."""

    data: list
    prev: list
    aux: list | None = None
    labels: list | None = None

    def __post_init__(self):
        if self.aux is None:
            p = np.shape(ad.value_of((self.data or self.prev)[0]))[-1]
            self.aux = [np.zeros(p)]
        if self.labels is None:
            self.labels = ([f"x{i}" for i in range(len(self.data))]
                           + [f"h{i}" for i in range(len(self.prev))]
                           + [f"aux{i}" for i in range(len(self.aux))])

    def pool(self):
        return list(self.data) + list(self.prev) + list(self.aux)


@dataclass
class SelectionMode:
    """``value`` picks the soft-mode forward value: the softmax mixture, or the
    discrete winner with softmax gradients on the weights (one-hot + w - stop(w))."""

    mode: str = "hard"
    temperature: float = 1.0
    value: str = "mixture"

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise BuildError(f"unknown selection mode {self.mode!r}")
        if self.value not in ("mixture", "winner"):
            raise BuildError(f"unknown soft value rule {self.value!r}")
        if not self.temperature > 0:
            raise BuildError("temperature must be positive")


@dataclass
class Candidates:
    values: object          # (n, p) array or Var
    provenance: np.ndarray  # (n, 5) rows (r, o, u, i, j)
    excluded: np.ndarray    # (n,) bool

    def __len__(self):
        return len(self.provenance)


@dataclass
class TreeNode:
    left: int
    right: int
    op: str
    act: str
    value: object
    r: int | None = None
    commutative: bool = True


@dataclass
class CellTree:
    """A cell as a DAG over a node pool: leaves first, then generated parents.

    Pool index ``k < len(leaf_values)`` is a leaf; ``len(leaf_values) + m`` is
    ``nodes[m]``.  Leaves may be shared; merges form a full binary tree once
    unfolded from ``root``.
    """

    leaf_labels: list
    leaf_values: list
    nodes: list
    root: int

    @property
    def n_leaves(self):
        return len(self.leaf_values)

    def is_leaf(self, k):
        return k < self.n_leaves

    def node(self, k) -> TreeNode:
        return self.nodes[k - self.n_leaves]

    def value(self, k):
        return self.leaf_values[k] if self.is_leaf(k) else self.node(k).value

    def label(self, k):
        return self.leaf_labels[k] if self.is_leaf(k) else f"n{k - self.n_leaves}"

    def reachable(self) -> list[int]:
        """Pool indices of generated nodes under the root, in creation order."""
        seen, stack = set(), [self.root]
        while stack:
            k = stack.pop()
            if self.is_leaf(k) or k in seen:
                continue
            seen.add(k)
            nd = self.node(k)
            stack += [nd.left, nd.right]
        return sorted(seen)

    def heap_map(self) -> dict[int, int]:
        """Heap index (root = 1, children 2i, 2i+1) -> pool index, internal nodes of the unfolded tree."""
        out, stack = {}, [(1, self.root)]
        while stack:
            h, k = stack.pop()
            if self.is_leaf(k):
                continue
            out[h] = k
            nd = self.node(k)
            stack += [(2 * h, nd.left), (2 * h + 1, nd.right)]
        return dict(sorted(out.items()))

    def leaf_depths(self) -> list[int]:
        """Root-to-leaf path lengths (edges) of the unfolded tree."""
        out, stack = [], [(self.root, 0)]
        while stack:
            k, d = stack.pop()
            if self.is_leaf(k):
                out.append(d)
                continue
            nd = self.node(k)
            stack += [(nd.left, d + 1), (nd.right, d + 1)]
        return sorted(out)

    @property
    def n_internal(self) -> int:
        return len(self.heap_map())

    def is_full(self) -> bool:
        return all(nd.left is not None and nd.right is not None for nd in self.nodes)

    def evaluate(self, params, leaf_values=None):
        """Recompute every generated node bottom-up from the recorded choices."""
        leaves = list(self.leaf_values if leaf_values is None else leaf_values)
        vals = leaves + [None] * len(self.nodes)
        for m, nd in enumerate(self.nodes):
            vals[self.n_leaves + m] = node_value(params, nd.r, nd.op, nd.act,
                                                 vals[nd.left], vals[nd.right])
        return vals[self.root], vals


def node_value(params, r, op, act, ci, cj):
    """Canonical evaluation ``u(o(L_r ci, R_r cj) + b_r)``."""
    L, R, b = params["L"], params["R"], params["b"]
    left = ad.matvec(ad.index(L, r), ci)
    right = ad.matvec(ad.index(R, r), cj)
    return ACTIVATIONS[act](ad.add(BINARY_OPS[op](left, right), ad.index(b, r)))


def pair_list(n: int):
    return list(combinations(range(n), 2))


def candidate_count(pool_size: int, n_l: int, catalog: OpCatalog) -> int:
    return n_l * len(catalog.binary_ops) * len(catalog.activations) * (pool_size * (pool_size - 1) // 2)


def enumerate_candidates(pool: Sequence, params, catalog: OpCatalog,
                         generated: Sequence[tuple] = ()) -> Candidates:
    """All parents formable from ``pool``; provenance ordered by (r, o, u, i, j).

    ``generated`` lists provenance tuples of already-selected parents, which
    are marked excluded (identity, not value, decides exclusion).
    """
    n = len(pool)
    if n < 2:
        raise BuildError(f"node pool has {n} element(s); at least 2 are required")
    L, R, b = params["L"], params["R"], params["b"]
    n_l = np.shape(ad.value_of(L))[0]
    p = np.shape(ad.value_of(pool[0]))[-1]
    C = ad.stack(pool, axis=0)
    LC = ad.einsum("rij,nj->rni", L, C)
    RC = ad.einsum("rij,nj->rni", R, C)
    pairs = pair_list(n)
    I = np.array([i for i, _ in pairs])
    J = np.array([j for _, j in pairs])
    left = ad.index(LC, (slice(None), I))
    right = ad.index(RC, (slice(None), J))
    bias = ad.reshape(b, (n_l, 1, p))
    per_op = []
    for o in catalog.binary_ops:
        pre = ad.add(BINARY_OPS[o](left, right), bias)
        per_op.append(ad.stack([ACTIVATIONS[u](pre) for u in catalog.activations], axis=1))
    cube = ad.stack(per_op, axis=1)          # (n_l, n_o, n_u, n_pairs, p)
    values = ad.reshape(cube, (-1, p))
    n_o, n_u, n_pairs = len(catalog.binary_ops), len(catalog.activations), len(pairs)
    rr, oo, uu, pp = np.meshgrid(np.arange(n_l), np.arange(n_o), np.arange(n_u),
                                 np.arange(n_pairs), indexing="ij")
    prov = np.stack([rr.ravel(), oo.ravel(), uu.ravel(), I[pp.ravel()], J[pp.ravel()]], axis=1)
    excluded = np.zeros(len(prov), dtype=bool)
    if generated:
        pos = {pr: k for k, pr in enumerate(pairs)}
        for (r, o, u, i, j) in generated:
            flat = ((r * n_o + o) * n_u + u) * n_pairs + pos[(i, j)]
            excluded[flat] = True
    return Candidates(values, prov, excluded)


@dataclass
class Selection:
    winner: int
    runner_up: int
    value: object
    score_winner: object
    score_runner_up: object
    weights: object = None


def straight_through(weights, winner, axis=-1):
    """One-hot forward weights carrying the softmax ``weights``' gradient."""
    w = np.asarray(ad.value_of(weights))
    onehot = np.zeros_like(w)
    np.put_along_axis(onehot, np.expand_dims(np.asarray(winner), axis), 1.0, axis)
    return ad.add(ad.sub(weights, w), onehot)


def select(cands: Candidates, scores, mode: SelectionMode = SelectionMode()) -> Selection:
    """Pick the best non-excluded candidate and the runner-up.

    Ties go to the lowest provenance tuple.  In soft mode the returned value is
    the temperature-softmax mixture over non-excluded candidates while the
    recorded winner stays the argmax.
    """
    s = np.asarray(ad.value_of(scores), dtype=np.float64)
    allowed = ~cands.excluded
    if allowed.sum() < 2:
        raise BuildError("fewer than 2 selectable candidates; the score margin is undefined")
    masked = np.where(allowed, s, -np.inf)
    w = int(np.argmax(masked))
    masked[w] = -np.inf
    w2 = int(np.argmax(masked))
    weights = None
    if mode.mode == "hard":
        value = ad.index(cands.values, w)
    else:
        weights = ad.softmax(ad.scale(scores, 1.0 / mode.temperature), mask=allowed)
        if mode.value == "winner":
            weights = straight_through(weights, w)
        value = ad.einsum("n,np->p", weights, cands.values)
    return Selection(w, w2, value, ad.index(scores, w), ad.index(scores, w2), weights)


def scorer_scores(scorer, cands: Candidates, k: int):
    if hasattr(scorer, "score_candidates"):
        return scorer.score_candidates(cands, k)
    return scorer(cands, k)


@dataclass
class CellResult:
    h: object
    tree: CellTree
    margins: list                      # (score c*, score c**) per contested iteration
    provenance: list = field(default_factory=list)
    candidate_counts: list = field(default_factory=list)
    selections: list = field(default_factory=list)


def build_cell(leaves: LeafSets, params, catalog: OpCatalog, scorer, iterations: int,
               mode: SelectionMode = SelectionMode()) -> CellResult:
    """Run the greedy construction for ``iterations`` rounds."""
    if iterations < 1:
        raise BuildError("iterations must be >= 1")
    pool = leaves.pool()
    n_leaves = len(pool)
    nodes: list[TreeNode] = []
    generated: list[tuple] = []
    margins, counts, sels = [], [], []
    for k in range(1, iterations + 1):
        cands = enumerate_candidates(pool, params, catalog, generated)
        counts.append(len(cands))
        scores = scorer_scores(scorer, cands, k)
        open_ = np.flatnonzero(~cands.excluded)
        if len(open_) == 1:
            # a forced merge: nothing to rank against, so no margin pair
            w = int(open_[0])
            sel = Selection(w, None, ad.index(cands.values, w), ad.index(scores, w), None)
        else:
            sel = select(cands, scores, mode)
        r, o, u, i, j = (int(v) for v in cands.provenance[sel.winner])
        op, act = catalog.binary_ops[o], catalog.activations[u]
        if mode.mode == "hard":
            value = node_value(params, r, op, act, pool[i], pool[j])
        else:
            value = sel.value
        nodes.append(TreeNode(i, j, op, act, value, r))
        generated.append((r, o, u, i, j))
        pool.append(value)
        if sel.runner_up is not None:
            margins.append((sel.score_winner, sel.score_runner_up))
        sels.append(sel)
    tree = CellTree(list(leaves.labels), pool[:n_leaves], nodes, n_leaves + iterations - 1)
    return CellResult(tree.value(tree.root), tree, margins, generated, counts, sels)
