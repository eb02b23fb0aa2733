"""Scoring functions alpha(v; Theta) used to rank candidate parent vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import autodiff as ad


class ScorerError(ValueError):
    pass


@dataclass
class NeuralScorer:
    """Two-layer network ``w2 . tanh(W1^T v + b1) + b2``.

    Entries may be arrays (inference) or tape Vars (training).  Works on a
    single vector ``(p,)`` or a stack of candidates ``(..., p)``.
    """

    W1: object
    b1: object
    w2: object
    b2: object

    @classmethod
    def from_params(cls, params, prefix="scorer."):
        return cls(params[prefix + "W1"], params[prefix + "b1"],
                   params[prefix + "w2"], params[prefix + "b2"])

    @staticmethod
    def init_params(p: int, hidden: int, rng: np.random.Generator, prefix="scorer."):
        a1, a2 = 1.0 / np.sqrt(p), 1.0 / np.sqrt(hidden)
        return {
            prefix + "W1": rng.uniform(-a1, a1, (p, hidden)),
            prefix + "b1": rng.uniform(-a1, a1, hidden),
            prefix + "w2": rng.uniform(-a2, a2, hidden),
            prefix + "b2": np.zeros(()),
        }

    def score(self, v):
        vv = ad.value_of(v)
        if not np.isfinite(vv).all():
            raise ad.NumericError(None, "affine-scorer")
        ndim = np.ndim(vv)
        lead = "abcdefg"[: ndim - 1]
        hidden = ad.tanh(ad.add(ad.einsum(f"{lead}i,ih->{lead}h", v, self.W1), self.b1))
        return ad.add(ad.einsum(f"{lead}h,h->{lead}", hidden, self.w2), self.b2)

    def score_candidates(self, cands, k: int):
        return self.score(cands.values)


def ordering_weights(n: int) -> np.ndarray:
    return np.arange(n, 0, -1, dtype=np.float64)


@dataclass
class RBFScorer:
    """Radial-basis scorer ``sum_k w_k exp(-|v - v_k|^2 / 2 sigma0^2)``.

    ``weights`` default to ``n, n-1, ..., 1`` so earlier anchors score higher.
    """

    anchors: np.ndarray
    sigma0_sq: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        if self.sigma0_sq <= 0:
            raise ScorerError("sigma0^2 must be positive")
        if self.weights is None:
            self.weights = ordering_weights(len(self.anchors))

    def score(self, v):
        vv = np.asarray(ad.value_of(v), dtype=np.float64)
        if not np.isfinite(vv).all():
            raise ad.NumericError(None, "rbf-scorer")
        flat = vv.reshape(-1, vv.shape[-1])
        d2 = cdist(flat, self.anchors, "sqeuclidean")
        out = np.exp(-d2 / (2.0 * self.sigma0_sq)) @ self.weights
        return out.reshape(vv.shape[:-1])

    def score_candidates(self, cands, k: int):
        return self.score(cands.values)


def min_half_sq_gap(vectors: np.ndarray) -> float:
    """Delta = 1/2 min_{j != k} |v_j - v_k|^2."""
    return 0.5 * float(pdist(np.asarray(vectors, dtype=np.float64), "sqeuclidean").min())


def wide_kernel_bound(vectors) -> float:
    """The large-width bound Delta / (log n^2 - log(n^2 - 1)).

    Reported for reference only: with it the kernel is nearly flat and the
    resulting scores do not follow list order.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    n = len(v)
    if n < 2:
        return np.inf
    return min_half_sq_gap(v) / (np.log(n * n) - np.log(n * n - 1.0))


def build_ordering_scorer(vectors, safety: float = 1.01) -> RBFScorer:
    """RBF scorer whose scores strictly decrease along the given list.

    With weights ``n+1-k`` and ``sigma0^2 = Delta / log(n(n+1)/2) / safety`` every
    off-anchor kernel value is below ``2 / (n(n+1))``, so anchor ``i`` scores at
    least ``n+1-i`` while anchor ``i+1`` scores below ``n+1-i``.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    n = len(v)
    if n == 1:
        return RBFScorer(v, 1.0)
    delta = min_half_sq_gap(v)
    if delta == 0.0:
        raise ScorerError("anchor vectors are not pairwise distinct")
    sigma0_sq = delta / np.log(n * (n + 1) / 2.0) / safety
    return RBFScorer(v, sigma0_sq)
