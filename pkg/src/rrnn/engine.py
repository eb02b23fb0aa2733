"""Unrolling tree-structured cells over time.

``forward_sequence`` runs the general greedy cell (one or several state
vectors per step).  ``forward_gru_variant`` keeps the GRU tree fixed and
lets the scorer pick a weight tuple at each of its eight merges; it is
batched over samples, which is what the trainer uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .cell import (ACTIVATIONS, BINARY_OPS, BuildError, CellTree, LeafSets, OpCatalog,
                   SelectionMode, TreeNode, build_cell, straight_through)
from .reference import GRU_SKELETON, sigmoid
from .scorer import NeuralScorer
from .tree_loss import compile_td, margin_terms, td_apply

STRUCTURE_PARAMS = ("L", "R", "b")


def init_params(p: int, n_l: int, hidden: int, n_out: int, out_in: int, rng) -> dict:
    """Uniform(-1/sqrt(p), 1/sqrt(p)) tuples, output layer and scorer."""
    a = 1.0 / np.sqrt(p)
    params = {
        "L": rng.uniform(-a, a, (n_l, p, p)),
        "R": rng.uniform(-a, a, (n_l, p, p)),
        "b": rng.uniform(-a, a, (n_l, p)),
    }
    params.update(NeuralScorer.init_params(p, hidden, rng))
    ao = 1.0 / np.sqrt(out_in)
    params["out.W"] = rng.uniform(-ao, ao, (n_out, out_in))
    params["out.b"] = np.zeros(n_out)
    return params


def bind(params: dict, tape: ad.Tape, names=None) -> dict:
    """Copy of ``params`` where the named entries (default all) are tape leaves."""
    names = set(params if names is None else names)
    return {k: (tape.leaf(v, name=k) if k in names else v) for k, v in params.items()}


@dataclass
class OutputLayer:
    mode: str = "h-only"

    def __post_init__(self):
        if self.mode not in ("h-only", "concat"):
            raise ValueError(f"unknown output mode {self.mode!r}")

    def in_dim(self, p):
        return 2 * p if self.mode == "concat" else p

    def logits(self, params, x, h):
        z = ad.concat([x, h], axis=-1) if self.mode == "concat" else h
        if np.ndim(ad.value_of(z)) == 1:
            return ad.add(ad.matvec(params["out.W"], z), params["out.b"])
        return ad.add(ad.einsum("bi,vi->bv", z, params["out.W"]), params["out.b"])


# ---------------------------------------------------------------- general recurrence

@dataclass(frozen=True)
class StateRecipe:
    """Leaves for one state: x_t, states of step t-1, earlier states of step t, zeros."""

    data: bool = True
    prev: tuple = (0,)
    current: tuple = ()
    n_aux: int = 1
    iterations: int = 8


@dataclass
class MultiStateConfig:
    recipes: list = field(default_factory=lambda: [StateRecipe()])
    output_state: int = -1

    def __post_init__(self):
        M = len(self.recipes)
        if M < 1:
            raise ValueError("at least one state is required")
        for i, rc in enumerate(self.recipes):
            if any(j >= i for j in rc.current):
                raise ValueError(f"state {i} may only use states j < {i} of the same step")
            if any(not 0 <= j < M for j in rc.prev):
                raise ValueError(f"state {i} references an unknown previous state")
            if rc.iterations < 1:
                raise ValueError("iterations must be >= 1")

    @property
    def M(self):
        return len(self.recipes)

    @classmethod
    def single(cls, iterations=8):
        return cls([StateRecipe(True, (0,), (), 1, iterations)])

    @classmethod
    def lstm_style(cls, it1=7, it2=2):
        """State 0 plays c_t (sees x, h, c_prev, 0); state 1 plays h_t (also sees c_t)."""
        return cls([StateRecipe(True, (1, 0), (), 1, it1),
                    StateRecipe(True, (1, 0), (0,), 1, it2)], output_state=1)


@dataclass
class SequenceResult:
    logits: list
    trees: list          # trees[t][i]
    margins: list        # margins[t][i] = list of (s*, s**) pairs
    states: list         # states[t][i]; states[0] is the initial state
    results: list = field(default_factory=list)


def _labels(rc: StateRecipe):
    return (["x"] if rc.data else []) + [f"h{j}_prev" for j in rc.prev] \
        + [f"h{j}_cur" for j in rc.current] + [f"zero{k}" for k in range(rc.n_aux)]


def forward_sequence(xs, params, catalog: OpCatalog, scorer, cfg: MultiStateConfig,
                     mode: SelectionMode = SelectionMode(), h0=None,
                     output: OutputLayer | None = None) -> SequenceResult:
    xs = list(xs)
    p = np.shape(ad.value_of(xs[0]))[-1]
    prev = list(h0) if h0 is not None else [np.zeros(p) for _ in range(cfg.M)]
    out = SequenceResult([], [], [], [prev], [])
    for t, x in enumerate(xs, start=1):
        cur, trees, margins, results = [], [], [], []
        for i, rc in enumerate(cfg.recipes):
            leaves = LeafSets(([x] if rc.data else []),
                              [prev[j] for j in rc.prev] + [cur[j] for j in rc.current],
                              [np.zeros(p) for _ in range(rc.n_aux)], _labels(rc))
            try:
                res = build_cell(leaves, params, catalog, scorer, rc.iterations, mode)
            except (BuildError, ValueError) as exc:
                # annotate in place so subclasses keep their own fields
                exc.where = (t, i)
                exc.args = (f"t={t} state={i}: {exc}",) + exc.args[1:]
                raise
            cur.append(res.h)
            trees.append(res.tree)
            margins.append(res.margins)
            results.append(res)
        prev = cur
        out.states.append(cur)
        out.trees.append(trees)
        out.margins.append(margins)
        out.results.append(results)
        if output is not None:
            out.logits.append(output.logits(params, x, cur[cfg.output_state]))
    return out


# ---------------------------------------------------------------- GRU-shaped variant

ZERO = 2
N_NODES = len(GRU_SKELETON)
GRU_HEAP = ((1, 7), (2, 5), (3, 6), (5, 1), (6, 3), (7, 4), (13, 1), (15, 2), (31, 0))
"""Heap index -> skeleton node of the unfolded GRU tree (``z`` appears twice)."""


@lru_cache(maxsize=8)
def gru_target_variants(cap: int = 64):
    """Heap -> skeleton slot maps of every child-swapped GRU tree."""
    from .reference import gru_target_tree
    from .tree_loss import iso_variant_maps
    p = 1
    z = np.zeros(p)
    w = {k: (np.zeros(p) if k[0] == "b" else np.zeros((p, p)))
         for k in ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wh", "Uh", "bh")}
    tree = gru_target_tree(w, z, z)
    return tuple(tuple((h, k - 3) for h, k in m) for m in iso_variant_maps(tree, cap))


_TD_PROGRAM = {}


def gru_td_program(aggregation_cap: int = 64):
    if aggregation_cap not in _TD_PROGRAM:
        _TD_PROGRAM[aggregation_cap] = compile_td(GRU_HEAP, gru_target_variants(aggregation_cap))
    return _TD_PROGRAM[aggregation_cap]


def teacher_nodes(w, x, h):
    """Batched GRU intermediates ``(B, 8, p)`` from frozen teacher weights."""
    r = sigmoid(x @ w["Wr"].T + h @ w["Ur"].T + w["br"])
    z = sigmoid(x @ w["Wz"].T + h @ w["Uz"].T + w["bz"])
    rh = r * h
    omz = 1.0 - z
    hh = np.tanh(x @ w["Wh"].T + rh @ w["Uh"].T + w["bh"])
    zh = z * h
    omzhh = omz * hh
    return np.stack([r, z, rh, omz, hh, zh, omzhh, zh + omzhh], axis=1)


@dataclass
class VariantResult:
    logits: list             # T entries of (B, V)
    states: list             # T + 1 entries of (B, p)
    choices: np.ndarray      # (B, T, 8) chosen tuple per skeleton node
    margin: object           # (B,) summed margin terms
    td: object               # (B,) summed tree distances, or None
    clamped: int
    nodes: list = field(default_factory=list)   # T entries of (B, 8, p)


def _apply(M, v):
    """Per-tuple products ``(n_l, p, p) x (B, p) -> (B, n_l, p)``."""
    return ad.einsum("rij,bj->bri", M, v)


def _apply_chosen(M, idx, v):
    return ad.einsum("bij,bj->bi", ad.index(M, idx), v)


def forward_gru_variant(X, params, scorer=None, mode: SelectionMode = SelectionMode(),
                        h0=None, teacher=None, output: OutputLayer | None = None,
                        clamp: float = 10.0, margin_M: float = 1.0, td_agg: str = "min",
                        iso_cap: int = 64, keep_nodes: bool = False) -> VariantResult:
    """Run the fixed GRU tree where each merge picks one of the ``n_l`` weight tuples.

    ``X`` is ``(B, T, p)`` (or ``(T, p)`` for one sample).  The second gate
    may not reuse the first gate's tuple when ``n_l >= 2`` since that would
    regenerate an already-built node.  With one tuple there is no choice and
    the cell is a GRU whose gates share that tuple.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    B, T, p = X.shape
    L, R, b = params["L"], params["R"], params["b"]
    n_l = np.shape(ad.value_of(L))[0]
    scorer = NeuralScorer.from_params(params) if scorer is None else scorer
    prog = gru_td_program(iso_cap) if teacher is not None else None
    h = np.zeros((B, p)) if h0 is None else h0
    rows = np.arange(B)
    states, logits, node_series = [h], [], []
    choices = np.zeros((B, T, N_NODES), dtype=np.int64)
    margin, td, clamped = None, None, 0

    def acc(total, term):
        return term if total is None else ad.add(total, term)

    for t in range(T):
        x = X[:, t]
        pool = [x, h, None]
        for k, (_, li, ri, op, act) in enumerate(GRU_SKELETON):
            a, c = pool[li], pool[ri]
            right_all = _apply(R, c)
            pre_all = right_all if li == ZERO else BINARY_OPS[op](_apply(L, a), right_all)
            cand = ACTIVATIONS[act](ad.add(pre_all, b))                 # (B, n_l, p)
            allowed = np.ones((B, n_l), dtype=bool)
            if k == 1 and n_l >= 2:
                allowed[rows, choices[:, t, 0]] = False
            if n_l == 1:
                idx = np.zeros(B, dtype=np.int64)
                value = ad.index(cand, (slice(None), 0))
            else:
                scores = scorer.score(cand)                            # (B, n_l)
                s = np.where(allowed, ad.value_of(scores), -np.inf)
                idx = np.argmax(s, axis=1)
                if allowed.sum(axis=1).min() >= 2:
                    s2 = s.copy()
                    s2[rows, idx] = -np.inf
                    idx2 = np.argmax(s2, axis=1)
                    gap = ad.sub(ad.index(scores, (rows, idx)), ad.index(scores, (rows, idx2)))
                    margin = acc(margin, margin_terms(gap, margin_M))
                if mode.mode == "hard":
                    right = _apply_chosen(R, idx, c)
                    pre = right if li == ZERO else BINARY_OPS[op](_apply_chosen(L, idx, a), right)
                    value = ACTIVATIONS[act](ad.add(pre, ad.index(b, idx)))
                else:
                    w = ad.softmax(ad.scale(scores, 1.0 / mode.temperature), axis=1, mask=allowed)
                    if mode.value == "winner":
                        w = straight_through(w, idx)
                    value = ad.einsum("bk,bkp->bp", w, cand)
            if act == "identity" and clamp is not None:
                clamped += int(np.sum(np.abs(ad.value_of(value)) > clamp))
                value = ad.clip(value, -clamp, clamp)
            choices[:, t, k] = idx
            pool.append(value)
        nodes = pool[3:]
        h_new = nodes[-1]
        if teacher is not None or keep_nodes:
            node_series.append(ad.stack(nodes, axis=1))
        if teacher is not None:
            stack = node_series[-1]
            tgt = teacher_nodes(teacher, x, np.asarray(ad.value_of(h)))
            td = acc(td, td_apply(stack, tgt[:, :, :], prog, td_agg))
        if output is not None:
            logits.append(output.logits(params, x, h_new))
        h = h_new
        states.append(h)
    if margin is None:
        margin = np.zeros(B)
    return VariantResult(logits, states, choices, margin, td, clamped, node_series)


def tuple_change_count(log_e, log_prev) -> int:
    """Number of (sample, step, node) entries whose chosen tuple changed."""
    a, b = np.asarray(log_e), np.asarray(log_prev)
    if a.shape != b.shape:
        raise ad.ContractError(f"tuple logs cover different index sets: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


def variant_tree(res: VariantResult, X, sample: int, t: int) -> CellTree:
    """The GRU-shaped tree of one (sample, step) with its chosen tuples and node values."""
    X = np.asarray(X, dtype=np.float64)
    X = X[None] if X.ndim == 2 else X
    x = X[sample, t]
    h = np.asarray(ad.value_of(res.states[t]))[sample]
    vals = np.asarray(ad.value_of(res.nodes[t]))[sample] if res.nodes else None
    nodes = []
    for k, (_, li, ri, op, act) in enumerate(GRU_SKELETON):
        v = vals[k] if vals is not None else None
        nodes.append(TreeNode(li, ri, op, act, v, int(res.choices[sample, t, k]),
                              commutative=True))
    return CellTree(["x", "h", "zero"], [x, h, np.zeros_like(x)], nodes, 3 + N_NODES - 1)
