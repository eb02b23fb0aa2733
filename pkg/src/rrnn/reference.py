"""Hand-written GRU and LSTM cells and the GRU cell drawn as a binary tree.

The tree form has leaves ``x, h, zero`` (pool indices 0, 1, 2) and eight
merges.  Node ``k`` lives at pool index ``3 + k``.
"""
from __future__ import annotations

import numpy as np

from .cell import CellTree, TreeNode


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


GRU_NAMES = ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wh", "Uh", "bh")
LSTM_NAMES = ("Wf", "Uf", "bf", "Wi", "Ui", "bi", "Wo", "Uo", "bo", "Wc", "Uc", "bc")


def random_weights(names, p, rng, scale=None):
    scale = 0.5 / np.sqrt(p) if scale is None else scale
    return {k: rng.uniform(-scale, scale, (p,) if k[0] == "b" else (p, p)) for k in names}


def gru_intermediates(w, x, h):
    """All eight intermediate vectors of one GRU step, in construction order."""
    r = sigmoid(w["Wr"] @ x + w["Ur"] @ h + w["br"])
    z = sigmoid(w["Wz"] @ x + w["Uz"] @ h + w["bz"])
    rh = r * h
    omz = 1.0 - z
    hh = np.tanh(w["Wh"] @ x + w["Uh"] @ rh + w["bh"])
    zh = z * h
    omzhh = omz * hh
    return [r, z, rh, omz, hh, zh, omzhh, zh + omzhh]


def gru_step(w, x, h):
    return gru_intermediates(w, x, h)[-1]


def lstm_intermediates(w, x, h, c):
    f = sigmoid(w["Wf"] @ x + w["Uf"] @ h + w["bf"])
    i = sigmoid(w["Wi"] @ x + w["Ui"] @ h + w["bi"])
    o = sigmoid(w["Wo"] @ x + w["Uo"] @ h + w["bo"])
    cc = np.tanh(w["Wc"] @ x + w["Uc"] @ h + w["bc"])
    cf = c * f
    ic = i * cc
    c_new = cf + ic
    tc = np.tanh(c_new)
    return {"f": f, "i": i, "o": o, "cc": cc, "cf": cf, "ic": ic, "c": c_new,
            "tanh_c": tc, "h": o * tc}


# (name, left, right, op, act); pool 0 = x, 1 = h, 2 = zero, node k at 3 + k
GRU_SKELETON = (
    ("r", 0, 1, "add", "sigmoid"),
    ("z", 0, 1, "add", "sigmoid"),
    ("rh", 1, 3, "hadamard", "identity"),
    ("1-z", 2, 4, "add", "one-minus"),
    ("hh", 0, 5, "add", "tanh"),
    ("zh", 1, 4, "hadamard", "identity"),
    ("(1-z)hh", 6, 7, "hadamard", "identity"),
    ("h", 8, 9, "add", "identity"),
)
GRU_LEAVES = ("x", "h", "zero")


def gru_target_tree(w, x, h) -> CellTree:
    """The GRU cell at ``(x, h)`` as a weightless tree carrying teacher values."""
    vals = gru_intermediates(w, x, h)
    nodes = [TreeNode(l, r, op, act, v, None, True)
             for (_, l, r, op, act), v in zip(GRU_SKELETON, vals)]
    return CellTree(list(GRU_LEAVES), [x, h, np.zeros_like(x)], nodes, 3 + len(nodes) - 1)


def gru_as_tuples(w):
    """Pack GRU weights as four (L, R, b) tuples; the fourth is (I, I, 0)."""
    p = w["br"].shape[0]
    eye = np.eye(p)
    return {
        "L": np.stack([w["Wr"], w["Wz"], w["Wh"], eye]),
        "R": np.stack([w["Ur"], w["Uz"], w["Uh"], eye]),
        "b": np.stack([w["br"], w["bz"], w["bh"], np.zeros(p)]),
    }


def lstm_as_tuples(w):
    """Five (L, R, b) tuples for the first LSTM pass: f, i, o, c and (I, I, 0)."""
    p = w["bf"].shape[0]
    eye = np.eye(p)
    return {
        "L": np.stack([w["Wf"], w["Wi"], w["Wo"], w["Wc"], eye]),
        "R": np.stack([w["Uf"], w["Ui"], w["Uo"], w["Uc"], eye]),
        "b": np.stack([w["bf"], w["bi"], w["bo"], w["bc"], np.zeros(p)]),
    }


def identity_tuple(p):
    return {"L": np.eye(p)[None], "R": np.eye(p)[None], "b": np.zeros((1, p))}
