"""Grow a GRU cell with the greedy builder.

The builder only ever sees a pool of vectors and a scorer.  Give it the four
GRU weight tuples and a scorer that ranks the GRU's own intermediates first,
and eight greedy merges rebuild r_t, z_t, ... , h_t exactly.
"""
import numpy as np

from rrnn.data import export_tree
from rrnn.reference import GRU_NAMES, random_weights
from rrnn.replication import GRU_SLOT_NAMES, run_gru_replication

p, seed = 4, 0
rng = np.random.default_rng(seed)
w = random_weights(GRU_NAMES, p, rng)
x, h = rng.uniform(-1, 1, p), rng.uniform(-1, 1, p)

tr = run_gru_replication(p, seed, x=x, h=h, weights=w)
print(tr.to_text())

# the textbook update, for comparison
sig = lambda a: 1 / (1 + np.exp(-a))
r = sig(w["Wr"] @ x + w["Ur"] @ h + w["br"])
z = sig(w["Wz"] @ x + w["Uz"] @ h + w["bz"])
hh = np.tanh(w["Wh"] @ x + w["Uh"] @ (r * h) + w["bh"])
print("\nbuilder h_t :", np.round(tr.final, 6))
print("direct  h_t :", np.round(z * h + (1 - z) * hh, 6))

# the tree itself, as a graph file any DOT renderer can draw
print()
print(export_tree(tr.tree, slot_names=GRU_SLOT_NAMES))
