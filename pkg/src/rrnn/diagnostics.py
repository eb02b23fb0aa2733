"""Gradient vanishing / exploding diagnostics for tree-structured cells.

Measures the constants of the sufficient condition for vanishing gradients
(matrix norms, activation slopes, binary-op Jacobians, loss sensitivity,
vector sizes), per-edge Jacobian norms, path lengths and the state-to-state
Jacobian series, and checks the path-sum inequality by exhaustive
enumeration of full binary tree shapes.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .cell import ACTIVATION_SLOPE, CellTree, OpCatalog

MAX_ENUM_N = 8


class DiagnosticsError(ValueError):
    pass


def min_depth(N: int) -> int:
    """floor(log2(N + 1)) + 1, exactly, for N >= 1."""
    if N < 1:
        raise DiagnosticsError("N must be >= 1")
    return (N + 1).bit_length()


@lru_cache(maxsize=None)
def tree_shapes(n: int) -> tuple:
    """All full binary trees with ``n`` internal nodes, each as sorted leaf depths (edges)."""
    if n == 0:
        return ((0,),)
    out = []
    for k in range(n):
        for a in tree_shapes(k):
            for b in tree_shapes(n - 1 - k):
                out.append(tuple(sorted(d + 1 for d in a + b)))
    return tuple(out)


def path_sum(depths, c0: float) -> float:
    return float(sum(c0 ** d for d in depths))


def path_bound(N: int, c0: float) -> float:
    return c0 ** N + sum(c0 ** k for k in range(1, N + 1))


@dataclass
class PathBoundResult:
    N: int
    c0: float
    lhs_max: float
    rhs: float
    eta: float
    n_shapes: int
    holds: bool
    holds_eta: bool
    equality: bool

    def to_text(self):
        return (f"N={self.N} C0={self.c0:g} shapes={self.n_shapes} lhs={self.lhs_max:.6g} "
                f"rhs={self.rhs:.6g} eta={self.eta:.6g} "
                f"bound {'holds' if self.holds and self.holds_eta else 'VIOLATED'}"
                + (" (equality)" if self.equality else ""))


def verify_path_bound(N: int, c0: float, rtol: float = 1e-12) -> PathBoundResult:
    """Max over every shape of sum_k C0^{l_k} against both closed-form bounds."""
    if not 0.0 < c0 < 0.5:
        raise DiagnosticsError("C0 must lie in (0, 1/2)")
    if not 1 <= N <= MAX_ENUM_N:
        raise DiagnosticsError(f"N must be in 1..{MAX_ENUM_N} for exhaustive enumeration")
    shapes = tree_shapes(N)
    lhs = max(path_sum(s, c0) for s in shapes)
    rhs = path_bound(N, c0)
    eta = 1.0 - (0.5 - c0)
    return PathBoundResult(N, c0, lhs, rhs, eta, len(shapes),
                           lhs <= rhs * (1 + rtol), lhs < eta,
                           bool(np.isclose(lhs, rhs, rtol=rtol, atol=0.0)))


def min_height_levels(N: int) -> int:
    """Smallest possible root-to-deepest-leaf node count over shapes with N internal nodes."""
    return min(max(s) for s in tree_shapes(N)) + 1


# ---------------------------------------------------------------- per-edge measurements

def activation_slope(act: str, value: np.ndarray) -> np.ndarray:
    """u'(pre) recovered from the node value v = u(pre)."""
    if act == "sigmoid":
        return value * (1.0 - value)
    if act == "tanh":
        return 1.0 - value * value
    if act == "one-minus":
        return -np.ones_like(value)
    return np.ones_like(value)


@dataclass
class EdgeRecord:
    tree: int
    node: int
    side: str
    norm: float
    slope: float
    op_norm: float
    mat_norm: float


def edge_jacobians(params, tree: CellTree, tree_id: int = 0, mat_norms=None):
    """Local Jacobians d parent / d child, ``diag(u') D_o M``, for each merge under the root."""
    L, R = np.asarray(ad.value_of(params["L"])), np.asarray(ad.value_of(params["R"]))
    out = []
    for k in tree.reachable():
        nd = tree.node(k)
        v = np.asarray(ad.value_of(nd.value))
        a = np.asarray(ad.value_of(tree.value(nd.left)))
        b = np.asarray(ad.value_of(tree.value(nd.right)))
        du = activation_slope(nd.act, v)
        for side, M, other in (("L", L[nd.r], R[nd.r] @ b), ("R", R[nd.r], L[nd.r] @ a)):
            d_op = np.ones_like(v) if nd.op == "add" else other
            J = (du * d_op)[:, None] * M
            mn = ad.spectral_norm(M) if mat_norms is None else mat_norms[(side, nd.r)]
            out.append(EdgeRecord(tree_id, k, side, ad.spectral_norm(J),
                                  float(np.max(np.abs(du))), float(np.max(np.abs(d_op))), mn))
    return out


def tree_vectors(tree: CellTree):
    ks = set(tree.reachable())
    leaves = set()
    for k in ks:
        nd = tree.node(k)
        leaves.update(c for c in (nd.left, nd.right) if tree.is_leaf(c))
    return [np.asarray(ad.value_of(tree.value(k))) for k in sorted(ks | leaves)]


@dataclass
class DiagnosticsReport:
    C1: float
    C2: float
    C3: float
    C3_bound: float | None
    C4: float | None
    C5: float
    product: float
    verdict: str
    path_lengths: list
    N: int
    l_min: int
    exploding_threshold: float
    exploding_flags: dict
    edges: list = field(default_factory=list)
    state_norms: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def rows(self):
        vt = "holds" if self.verdict == "vanishing-sufficient-holds" else "inconclusive"
        tau = self.exploding_threshold
        rows = [
            ("C1", self.C1, "power iteration over L and R", tau, "ge-threshold" if self.C1 >= tau else "below"),
            ("C2", self.C2, "analytic sup|u'| over catalog", tau, "ge-threshold" if self.C2 >= tau else "below"),
            ("C3", self.C3, "max observed binary-op Jacobian", tau, "ge-threshold" if self.C3 >= tau else "below"),
            ("C3_bound", self.C3_bound, "sqrt(p) C1 C5", "", ""),
            ("C4", self.C4, "max |dE_t/dh_t|", "", ""),
            ("C5", self.C5, "max inf-norm of tree vectors", "", ""),
            ("C1*C2*C3", self.product, "product", 0.5, vt),
            ("l_min", self.l_min, "floor(log2(N+1))+1", "", ""),
            ("exploding_threshold", tau, "(N+1)^(-1/(3 l_min))", "", ""),
        ]
        for name in sorted(self.extra):
            rows.append((name, self.extra[name], "empirical", "", ""))
        for name, flag in self.exploding_flags.items():
            rows.append((f"exploding:{name}", int(flag), "condition check", tau, "flag" if flag else "clear"))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["name", "value", "source", "threshold", "verdict"])
        for r in self.rows():
            w.writerow(["" if x is None else (f"{x:.10g}" if isinstance(x, float) else x) for x in r])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        for name, val, src, thr, ver in self.rows():
            v = "n/a" if val is None else (f"{val:.6g}" if isinstance(val, float) else str(val))
            t = "" if thr is None else (f"{thr:.6g}" if isinstance(thr, float) else str(thr))
            lines.append(f"{name:<32s} {v:>12s}  {src:<32s} {t:<10s} {ver}")
        lines.append(f"verdict: {self.verdict}")
        if self.state_norms:
            lines.append("state jacobian norms: " + " ".join(f"{x:.3g}" for x in self.state_norms))
        return "\n".join(lines)


def scorer_input_grad_norms(params, vectors, prefix="scorer."):
    """|d alpha / d v| for the two-layer tanh scorer at each vector."""
    W1, b1, w2 = (np.asarray(ad.value_of(params[prefix + k])) for k in ("W1", "b1", "w2"))
    V = np.atleast_2d(np.asarray(vectors))
    hid = np.tanh(V @ W1 + b1)
    g = ((1.0 - hid ** 2) * w2) @ W1.T
    return np.linalg.norm(g, axis=1)


def estimate_constants(params, trees, catalog: OpCatalog | None = None, state_grads=None,
                       target_roots=None, logits_grads=None) -> DiagnosticsReport:
    """Assemble the constants of the vanishing condition from built trees."""
    trees = list(trees)
    if not trees:
        raise DiagnosticsError("at least one tree is required")
    L = np.asarray(ad.value_of(params["L"]))
    R = np.asarray(ad.value_of(params["R"]))
    n_l, p = L.shape[0], L.shape[1]
    mat_norms = {}
    for r in range(n_l):
        mat_norms[("L", r)] = ad.spectral_norm(L[r])
        mat_norms[("R", r)] = ad.spectral_norm(R[r])
    C1 = max(mat_norms.values())
    used_acts = {tree.node(k).act for tree in trees for k in tree.reachable()}
    used_ops = {tree.node(k).op for tree in trees for k in tree.reachable()}
    acts = catalog.activations if catalog is not None else sorted(used_acts)
    ops = catalog.binary_ops if catalog is not None else sorted(used_ops)
    C2 = max(ACTIVATION_SLOPE[a] for a in acts)
    edges = []
    for i, tree in enumerate(trees):
        edges += edge_jacobians(params, tree, i, mat_norms)
    had = [e.op_norm for e in edges if trees[e.tree].node(e.node).op == "hadamard"]
    C3 = 1.0 if "add" in ops else 0.0
    if had:
        C3 = max(C3, max(had))
    C5 = max(float(np.max(np.abs(v))) for t in trees for v in tree_vectors(t))
    C3_bound = float(np.sqrt(p) * C1 * C5) if "hadamard" in ops else None
    C4 = None
    if state_grads is not None:
        C4 = max(float(np.linalg.norm(g)) for g in state_grads)
    product = C1 * C2 * C3
    bounded = C4 is None or np.isfinite(C4)
    verdict = "vanishing-sufficient-holds" if product < 0.5 and bounded else "inconclusive"
    N = max(t.n_internal for t in trees)
    l_min = min_depth(N)
    tau = (N + 1) ** (-1.0 / (3 * l_min))
    flags = {
        "activation-slope": any(ACTIVATION_SLOPE[a] >= tau for a in acts),
        "matrix-norm": C1 >= tau,
        "left-op-jacobian": any(e.op_norm >= tau for e in edges if e.side == "L"),
        "right-op-jacobian": any(e.op_norm >= tau for e in edges if e.side == "R"),
    }
    extra = {}
    if "out.W" in params:
        W = np.asarray(ad.value_of(params["out.W"]))
        extra["C7"] = ad.spectral_norm(W[:, -p:])
    if target_roots is not None:
        extra["C8"] = max(float(np.linalg.norm(v)) for v in target_roots)
    if "scorer.W1" in params:
        allv = np.vstack([v for t in trees for v in tree_vectors(t)])
        extra["C9"] = float(scorer_input_grad_norms(params, allv).max())
    if logits_grads is not None:
        extra["C6"] = max(float(np.linalg.norm(g)) for g in logits_grads)
    return DiagnosticsReport(C1, C2, C3, C3_bound, C4, C5, product, verdict,
                             [t.leaf_depths() for t in trees], N, l_min, tau, flags, edges,
                             extra=extra)


# ---------------------------------------------------------------- state Jacobians

@dataclass
class StateJacobianSeries:
    norms: list            # |dh_t / dh_{t-1}|, t = 2..T
    chained: list          # |dh_t / dh_1|, t = 2..T, from products of dense step Jacobians
    structural: list       # True where h_{t-1} is not an ancestor of h_t
    rate: float            # geometric-mean per-step decay of the chained norm

    def below(self, thresh=1e-12) -> bool:
        return bool(self.chained) and self.chained[-1] < thresh


def measure_state_jacobians(hs, prev_used=None) -> StateJacobianSeries:
    """``hs`` are recorded states h_1..h_T on one tape (h_1 must be a Var)."""
    norms, chained, flags = [], [], []
    prod = None
    for t in range(1, len(hs)):
        out, inp = hs[t], hs[t - 1]
        J = ad.jacobian(out, inp)
        structural = not np.any(J) if prev_used is None else not prev_used[t]
        flags.append(bool(structural))
        norms.append(0.0 if structural else ad.spectral_norm(J))
        prod = J if prod is None else J @ prod
        chained.append(ad.spectral_norm(prod))
    rate = float(np.exp(np.log(max(chained[-1], 1e-300)) / len(chained))) if chained else 1.0
    return StateJacobianSeries(norms, chained, flags, rate)


# ---------------------------------------------------------------- constructed vanishing regime

@dataclass
class VanishingRun:
    report: DiagnosticsReport
    series: StateJacobianSeries
    c0: float
    eta: float
    bound: list            # eta^(t-1), aligned with series.chained (t = 2..T)

    def within_bound(self, rtol=1e-9) -> bool:
        return all(c <= b * (1 + rtol) for c, b in zip(self.series.chained, self.bound))


def vanishing_run(p: int = 4, T: int = 50, scale: float = 0.8, n_l: int = 2,
                  iterations: int = 3, seed: int = 0) -> VanishingRun:
    """Unroll a cell whose constants give C1 C2 C3 = scale / 4 and measure |dh_t/dh_1|.

    Tuples are ``scale`` times random orthogonal matrices, the catalog is
    sigmoid with addition only, and the pool is {x_t, h_{t-1}}.
    """
    from scipy.stats import ortho_group

    from .engine import MultiStateConfig, StateRecipe, forward_sequence
    from .scorer import NeuralScorer

    rng = np.random.default_rng(seed)
    orth = lambda: np.stack([ortho_group.rvs(p, random_state=rng) for _ in range(n_l)])  # noqa: E731
    params = {"L": scale * orth(), "R": scale * orth(), "b": rng.uniform(-0.1, 0.1, (n_l, p))}
    params.update(NeuralScorer.init_params(p, 8, rng))
    catalog = OpCatalog(("sigmoid",), ("add",))
    tape = ad.Tape()
    h0 = tape.leaf(rng.uniform(-1, 1, p), name="h0")
    xs = rng.uniform(-1, 1, (T, p))
    cfg = MultiStateConfig([StateRecipe(True, (0,), (), 0, iterations)])
    res = forward_sequence(xs, params, catalog, NeuralScorer.from_params(params), cfg, h0=[h0])
    hs = [s[0] for s in res.states[1:]]
    series = measure_state_jacobians(hs)
    report = estimate_constants(params, [tr[0] for tr in res.trees], catalog)
    c0 = report.product
    eta = 1.0 - (0.5 - c0)
    return VanishingRun(report, series, c0, eta, [eta ** (t - 1) for t in range(2, T + 1)])
