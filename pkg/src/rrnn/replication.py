"""Drive the greedy cell builder into reproducing GRU and LSTM cells.

With the right weight tuples and an ordering scorer that, at every round,
ranks the intended winner above every competing candidate value, the
builder's eight (GRU) or seven-plus-two (LSTM) rounds reproduce the usual
gate equations exactly.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cell import CellResult, LeafSets, OpCatalog, build_cell
from .reference import (GRU_NAMES, LSTM_NAMES, gru_as_tuples, gru_intermediates,
                        identity_tuple, lstm_as_tuples, lstm_intermediates, random_weights)
from .scorer import ScorerError, build_ordering_scorer

GRU_CATALOG = OpCatalog(("sigmoid", "tanh", "one-minus", "identity"), ("add", "hadamard"))
LSTM1_CATALOG = OpCatalog(("sigmoid", "tanh", "identity"), ("add", "hadamard"))
LSTM2_CATALOG = OpCatalog(("tanh", "identity"), ("add", "hadamard"))

GRU_SLOT_NAMES = {("L", 0): "W_r", ("R", 0): "W_r'", ("L", 1): "W_z", ("R", 1): "W_z'",
                  ("L", 2): "W_h", ("R", 2): "W_h'", ("L", 3): "I", ("R", 3): "I"}
"""Edge labels for trees built on ``gru_as_tuples`` weights."""


def _prov(catalog, r, op, act, i, j):
    return (r, catalog.binary_ops.index(op), catalog.activations.index(act), i, j)


# Expected winners as (tuple r, op, act, i, j) over the pool x=0, h=1, zero=2, P_k=2+k.
GRU_PLAN = [
    ("r_t", (0, "add", "sigmoid", 0, 1)),
    ("z_t", (1, "add", "sigmoid", 0, 1)),
    ("r_t*h", (3, "hadamard", "identity", 1, 3)),
    ("1-z_t", (3, "add", "one-minus", 2, 4)),
    ("h~_t", (2, "add", "tanh", 0, 5)),
    ("z_t*h", (3, "hadamard", "identity", 1, 4)),
    ("(1-z_t)*h~_t", (3, "hadamard", "identity", 6, 7)),
    ("h_t", (3, "add", "identity", 8, 9)),
]
GRU_KEYS = ["r", "z", "rh", "omz", "hh", "zh", "omzhh", "h"]

# Pass 1 pool: x=0, h=1, c_prev=2, zero=3, P_k=3+k.
LSTM1_PLAN = [
    ("f_t", (0, "add", "sigmoid", 0, 1)),
    ("i_t", (1, "add", "sigmoid", 0, 1)),
    ("o_t", (2, "add", "sigmoid", 0, 1)),
    ("c~_t", (3, "add", "tanh", 0, 1)),
    ("c_prev*f_t", (4, "hadamard", "identity", 2, 4)),
    ("i_t*c~_t", (4, "hadamard", "identity", 5, 7)),
    ("c_t", (4, "add", "identity", 8, 9)),
]
LSTM1_KEYS = ["f", "i", "o", "cc", "cf", "ic", "c"]

# Pass 2 pool: x=0, h=1, c_prev=2, c_t=3, o_t=4, zero=5, P_k=5+k.
LSTM2_PLAN = [
    ("tanh(c_t)", (0, "add", "tanh", 3, 5)),
    ("h_t", (0, "hadamard", "identity", 4, 6)),
]
LSTM2_KEYS = ["tanh_c", "h"]


class ValueCollision(ScorerError):
    def __init__(self, k, target, colliding):
        self.iteration, self.target, self.colliding = k, target, colliding
        super().__init__(f"iteration {k}: candidate {colliding} has the same value as "
                         f"intended winner {target}")


@dataclass
class PlanScorer:
    """Per-round ordering scorer: the planned winner first, then every distinct competitor.

    With ``ties`` a competitor sharing the winner's value shares its score, and
    tie-breaking may pick it; the value, not the provenance, is then reproduced.
    """

    plan: list
    ties: bool = False

    def score_candidates(self, cands, k):
        vals = np.asarray(cands.values, dtype=np.float64)
        prov = cands.provenance
        target = self.plan[k - 1]
        t = int(np.flatnonzero((prov == np.asarray(target)).all(axis=1))[0])
        competitors = np.flatnonzero(~cands.excluded)
        competitors = competitors[competitors != t]
        same = np.all(vals[competitors] == vals[t], axis=1)
        if same.any() and not self.ties:
            raise ValueCollision(k, target, tuple(int(a) for a in prov[competitors[np.argmax(same)]]))
        others = np.unique(vals[competitors[~same]], axis=0)
        if len(others) == 0:
            return np.zeros(len(vals))
        return build_ordering_scorer(np.vstack([vals[t][None], others])).score(vals)


@dataclass
class StepRecord:
    iteration: int
    expression: str
    provenance: tuple
    value: np.ndarray
    expected: np.ndarray
    deviation: float
    provenance_ok: bool


@dataclass
class StepTranscript:
    variant: str
    seed: int
    p: int
    steps: list = field(default_factory=list)
    final: np.ndarray | None = None
    final_expected: np.ndarray | None = None
    tree: object = None

    @property
    def max_deviation(self):
        devs = [s.deviation for s in self.steps]
        if self.final is not None:
            devs.append(float(np.max(np.abs(self.final - self.final_expected))))
        return max(devs)

    def passed(self, tol=1e-9):
        return all(s.provenance_ok for s in self.steps) and self.max_deviation < tol

    def to_text(self):
        lines = [f"{self.variant} seed={self.seed} p={self.p}"]
        for s in self.steps:
            flag = "" if s.provenance_ok else "  WRONG-PROVENANCE"
            lines.append(f"  k={s.iteration:<2d} {s.expression:<14s} prov={s.provenance} "
                         f"dev={s.deviation:.3e}{flag}")
        lines.append(f"  max deviation {self.max_deviation:.3e}")
        return "\n".join(lines)

    def csv_rows(self):
        return [(self.variant, self.seed, s.iteration, s.expression, f"{s.deviation:.6e}")
                for s in self.steps]


def write_csv(transcripts, fh):
    w = csv.writer(fh)
    w.writerow(["variant", "seed", "iteration", "expected_expr", "deviation"])
    for t in transcripts:
        w.writerows(t.csv_rows())


def transcripts_csv(transcripts) -> str:
    buf = io.StringIO()
    write_csv(transcripts, buf)
    return buf.getvalue()


def _run_plan(variant, seed, p, leaves, params, catalog, plan, keys, expected, ties=False) -> tuple:
    provs = [_prov(catalog, *spec) for _, spec in plan]
    res: CellResult = build_cell(leaves, params, catalog, PlanScorer(provs, ties), len(plan))
    tr = StepTranscript(variant, seed, p)
    for k, ((name, _), want, key) in enumerate(zip(plan, provs, keys), start=1):
        got = np.asarray(res.tree.nodes[k - 1].value)
        exp = expected[key]
        tr.steps.append(StepRecord(k, name, res.provenance[k - 1], got, exp,
                                   float(np.max(np.abs(got - exp))),
                                   res.provenance[k - 1] == want))
    return tr, res


def run_gru_replication(p: int = 4, seed: int = 0, x=None, h=None, weights=None,
                        ties: bool = False) -> StepTranscript:
    rng = np.random.default_rng(seed)
    w = random_weights(GRU_NAMES, p, rng) if weights is None else weights
    x = rng.uniform(-1, 1, p) if x is None else np.asarray(x, dtype=np.float64)
    h = rng.uniform(-1, 1, p) if h is None else np.asarray(h, dtype=np.float64)
    expected = dict(zip(GRU_KEYS, gru_intermediates(w, x, h)))
    leaves = LeafSets([x], [h], [np.zeros(p)], ["x", "h", "zero"])
    tr, res = _run_plan("gru", seed, p, leaves, gru_as_tuples(w), GRU_CATALOG,
                        GRU_PLAN, GRU_KEYS, expected, ties)
    tr.final, tr.final_expected = np.asarray(res.h), expected["h"]
    tr.tree = res.tree
    return tr


def run_lstm_replication(p: int = 4, seed: int = 0, x=None, h=None, c=None, weights=None,
                         ties: bool = False):
    rng = np.random.default_rng(seed)
    w = random_weights(LSTM_NAMES, p, rng) if weights is None else weights
    x = rng.uniform(-1, 1, p) if x is None else np.asarray(x, dtype=np.float64)
    h = rng.uniform(-1, 1, p) if h is None else np.asarray(h, dtype=np.float64)
    c = rng.uniform(-1, 1, p) if c is None else np.asarray(c, dtype=np.float64)
    expected = lstm_intermediates(w, x, h, c)
    zero = np.zeros(p)
    leaves1 = LeafSets([x], [h, c], [zero], ["x", "h", "c_prev", "zero"])
    t1, r1 = _run_plan("lstm-pass1", seed, p, leaves1, lstm_as_tuples(w), LSTM1_CATALOG,
                       LSTM1_PLAN, LSTM1_KEYS, expected, ties)
    c_t = np.asarray(r1.h)
    o_t = np.asarray(r1.tree.nodes[2].value)
    t1.final, t1.final_expected = c_t, expected["c"]
    leaves2 = LeafSets([x], [h, c, c_t, o_t], [zero], ["x", "h", "c_prev", "c_t", "o_t", "zero"])
    t2, r2 = _run_plan("lstm-pass2", seed, p, leaves2, identity_tuple(p), LSTM2_CATALOG,
                       LSTM2_PLAN, LSTM2_KEYS, expected, ties)
    t2.final, t2.final_expected = np.asarray(r2.h), expected["h"]
    t1.tree, t2.tree = r1.tree, r2.tree
    return t1, t2


def replicate(variant: str, seeds: int, p: int, max_reseed: int = 5, start: int = 0):
    """Run ``seeds`` replications; a value collision moves on to a fresh seed."""
    if variant not in ("gru", "lstm"):
        raise ValueError(f"unknown variant {variant!r}")
    out, reseeds, done, s = [], 0, 0, start
    while done < seeds:
        try:
            if variant == "gru":
                out.append(run_gru_replication(p, s))
            else:
                out.extend(run_lstm_replication(p, s))
            done += 1
        except ValueCollision:
            reseeds += 1
            if reseeds > max_reseed * seeds:
                raise
        s += 1
    return out, reseeds
