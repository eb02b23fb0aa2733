"""How far is a freshly grown cell from a GRU?

Tree distance matches every subtree of the predicted cell against the best
subtree of the target.  The target is a GRU evaluated at the same (x, h);
children of commutative merges may be swapped, so the loss takes the best
of the 64 variants.
"""
import numpy as np

from rrnn.cell import LeafSets, OpCatalog, build_cell
from rrnn.reference import GRU_NAMES, gru_target_tree, random_weights
from rrnn.scorer import NeuralScorer
from rrnn.tree_loss import isomorphism_class, margin_terms, tree_distance

p = 4
rng = np.random.default_rng(1)
params = {"L": rng.uniform(-.5, .5, (4, p, p)), "R": rng.uniform(-.5, .5, (4, p, p)),
          "b": rng.uniform(-.5, .5, (4, p))}
scorer = NeuralScorer.from_params(NeuralScorer.init_params(p, 16, rng))
x, h = rng.uniform(-1, 1, p), rng.uniform(-1, 1, p)

res = build_cell(LeafSets([x], [h]), params, OpCatalog(), scorer, 8)
print("merges picked (r, op, act, i, j):")
for prov in res.provenance:
    print("  ", prov)

target = gru_target_tree(random_weights(GRU_NAMES, p, rng), x, h)
iso = isomorphism_class(target, cap=10_000)
print(f"\nGRU tree has {len(iso)} child-swapped variants")
tds = [tree_distance(res.tree, t) for t in iso]
print(f"tree distance to the GRU: best {min(tds):.4f}, worst {max(tds):.4f}")
print(f"a tree against itself: {tree_distance(res.tree, res.tree)}")

# how confident was each pick?  gaps above M earn the full -1
gaps = np.array([float(a - b) for a, b in res.margins])
print("\nscore gaps:", np.round(gaps, 4))
print("margin terms (M = 0.1):", margin_terms(gaps, 0.1))
