"""Train a small RRNN-GRU on characters.

The cell keeps the GRU's shape but every merge picks one of n_l weight
tuples with a learned scorer.  Training alternates between the tuples and
the scorer; N_e counts how many picks changed since the last epoch and
should fall as the structure settles.  A plain GRU (one tuple) is trained
alongside for reference.

Takes about twenty seconds.  Pass --full to use configs/char_lm.json settings.
"""
import math
import sys

from rrnn.data import char_embeddings, fixture_path, lm_arrays, load_char_corpus
from rrnn.trainer import Model, ModelConfig, TrainConfig, train

full = "--full" in sys.argv
counts, epochs = ((500, 100, 100), 30) if full else ((120, 40, 40), 8)
corpus = load_char_corpus(fixture_path("public_domain.txt"), 20, counts, seed=0)
emb = char_embeddings(16)
tr, va = lm_arrays(corpus["train"], emb), lm_arrays(corpus["val"], emb)
cfg = TrainConfig(batch_size=16, lr=1e-2, lr_decay=0.9, epochs=epochs, alternate_every=2, seed=0)

print(f"uniform guess: {math.log2(27):.3f} bits per character\n")
for name, n_l in (("RRNN-GRU", 4), ("GRU", 1)):
    model = Model(ModelConfig(p=16, n_l=n_l, hidden=32), seed=0)
    res = train(model, tr, va, cfg)
    print(name)
    for m in res.metrics:
        ne = "" if m.N_e is None else m.N_e
        print(f"  epoch {m.epoch:2d} {m.phase:<9s} val bpc {m.val_metric:.3f}  N_e {ne}")
    print(f"  best {res.best_metric:.3f} at epoch {res.best_epoch}\n")
