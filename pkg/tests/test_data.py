import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from rrnn.cell import LeafSets, OpCatalog, build_cell
from rrnn.data import (ALPHABET, SPACE_TOKEN, DataError, EmbeddingTable, char_embeddings,
                       classification_arrays, clean_text, export_tree, fixture_path, graph_to_tree,
                       lm_arrays, load_char_corpus, load_corpus, load_embeddings, load_labeled_text,
                       load_run_config, pad_left, parse_dot, parse_run_config, save_corpus,
                       tree_graph, write_embeddings)
from rrnn.replication import GRU_SLOT_NAMES, run_gru_replication
from rrnn.scorer import NeuralScorer


def _text(tmp_path, body, name="c.txt"):
    path = tmp_path / name
    path.write_text(body, encoding="utf-8")
    return path


# ---------------------------------------------------------------- corpus

def test_clean_text():
    assert clean_text("Hello,  World!\n42 times") == "hello world times"


def test_exact_fit(tmp_path):
    rng = np.random.default_rng(0)
    body = "".join(rng.choice(list(ALPHABET), 100))
    c = load_char_corpus(_text(tmp_path, body), 20, (5, 0, 0))
    assert c["train"].shape == (5, 20) and c["val"].shape == (0, 20)
    assert sorted(c.offsets["train"].tolist()) == [0, 20, 40, 60, 80]
    for seq, off in zip(c["train"], c.offsets["train"]):
        assert "".join(ALPHABET[i] for i in seq) == body[off:off + 20]


def test_too_many_sequences(tmp_path):
    with pytest.raises(DataError, match="only 5 fit"):
        load_char_corpus(_text(tmp_path, "a" * 100), 20, (4, 1, 1))


def test_out_of_alphabet_names_offset(tmp_path):
    with pytest.raises(DataError, match="offset 3"):
        load_char_corpus(_text(tmp_path, "abcDef" * 10), 5, (1, 0, 0))


def test_same_seed_same_bytes():
    path = fixture_path("public_domain.txt")

    def digest(seed):
        c = load_char_corpus(path, 20, (50, 10, 10), seed)
        h = hashlib.sha256()
        for k in ("train", "val", "test"):
            h.update(c[k].tobytes())
        return h.hexdigest()

    assert digest(3) == digest(3) != digest(4)


@pytest.mark.parametrize("seed", range(5))
def test_splits_are_disjoint(seed):
    c = load_char_corpus(fixture_path("public_domain.txt"), 20, (500, 100, 100), seed)
    ranges = [set(range(o, o + 20)) for k in ("train", "val", "test") for o in c.offsets[k]]
    seen = set()
    for r in ranges:
        assert not (seen & r)
        seen |= r


def test_corpus_cache_round_trip(tmp_path):
    c = load_char_corpus(fixture_path("public_domain.txt"), 10, (20, 5, 5), 1)
    save_corpus(c, tmp_path / "c.npz")
    d = load_corpus(tmp_path / "c.npz")
    assert d.alphabet == c.alphabet and d.seq_len == 10
    for k in c.splits:
        np.testing.assert_array_equal(d[k], c[k])
        np.testing.assert_array_equal(d.offsets[k], c.offsets[k])


def test_lm_arrays_shift():
    seqs = np.array([[1, 2, 3, 4]])
    emb = np.arange(27 * 2, dtype=float).reshape(27, 2)
    X, Y = lm_arrays(seqs, emb)
    np.testing.assert_array_equal(X[0], emb[[1, 2, 3]])
    np.testing.assert_array_equal(Y[0], [2, 3, 4])


# ---------------------------------------------------------------- classification samples

def test_pad_left():
    out = pad_left([[1, 2], [3, 4, 5, 6]], 3)
    assert out.tolist() == [[0, 1, 2], [4, 5, 6]]


def test_labeled_text_and_arrays(tmp_path):
    path = _text(tmp_path, "2\tgood film\n0\tbad\n\n1\tfine but long movie\n")
    samples = load_labeled_text(path)
    assert samples[1] == (0, ["bad"])
    table = EmbeddingTable({"good": np.ones(2), "bad": -np.ones(2)}, 2)
    X, y = classification_arrays(samples, table, 3)
    assert y.tolist() == [2, 0, 1]
    np.testing.assert_array_equal(X[0], [[0, 0], [1, 1], [0, 0]])    # "film" is unknown
    np.testing.assert_array_equal(X[1], [[0, 0], [0, 0], [-1, -1]])


def test_labeled_text_needs_tab(tmp_path):
    with pytest.raises(DataError, match=":1:"):
        load_labeled_text(_text(tmp_path, "2 good film\n"))


# ---------------------------------------------------------------- embeddings

def test_embedding_line(tmp_path):
    t = load_embeddings(_text(tmp_path, "a 0.1 0.2\n"), 2)
    np.testing.assert_array_equal(t["a"], [0.1, 0.2])


def test_embedding_short_line(tmp_path):
    with pytest.raises(DataError, match=":2:"):
        load_embeddings(_text(tmp_path, "a 0.1 0.2\nb 0.3\n"), 2)


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    t = EmbeddingTable({f"w{i}": rng.normal(size=5) for i in range(10)}, 5)
    write_embeddings(tmp_path / "e.txt", t)
    back = load_embeddings(tmp_path / "e.txt", 5)
    assert list(back.vectors) == list(t.vectors)
    for k, v in t.vectors.items():
        assert back[k].tobytes() == v.tobytes()


def test_bundled_char_table():
    E = char_embeddings(16)
    assert E.shape == (27, 16)
    t = load_embeddings(fixture_path("char_emb16.txt"), 16)
    np.testing.assert_array_equal(E[0], t[SPACE_TOKEN])


# ---------------------------------------------------------------- tree export

def test_single_merge_export():
    a, b = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    params = {"L": np.eye(2)[None], "R": np.eye(2)[None], "b": np.zeros((1, 2))}
    res = build_cell(LeafSets([a], [b], aux=[]), params, OpCatalog(("identity",), ("add",)),
                     lambda c, k: np.zeros(len(c)), 1)
    g = tree_graph(res.tree)
    assert len(g.nodes) == 3 and len(g.edges) == 2
    assert g.nodes[-1][1] == "(identity, add, b0)"


def test_gru_tree_export_labels():
    tree = run_gru_replication(4, 0).tree
    g = parse_dot(export_tree(tree, slot_names=GRU_SLOT_NAMES))
    internal = [n for n in g.nodes if n[1].startswith("(")]
    assert len(internal) == 8 and len(g.nodes) == 11 and len(g.edges) == 16
    labels = {lab for _, _, lab in g.edges}
    assert {"W_r", "W_r'", "W_z", "W_z'", "W_h", "W_h'"} <= labels


@pytest.mark.parametrize("seed", range(5))
def test_export_parse_reexport_idempotent(seed, tmp_path):
    rng = np.random.default_rng(seed)
    p = 3
    params = {"L": rng.normal(size=(2, p, p)), "R": rng.normal(size=(2, p, p)),
              "b": rng.normal(size=(2, p))}
    sc = NeuralScorer.from_params(NeuralScorer.init_params(p, 4, rng))
    tree = build_cell(LeafSets([rng.normal(size=p)], [rng.normal(size=p)]), params,
                      OpCatalog(), sc, int(rng.integers(1, 7))).tree
    first = export_tree(tree, tmp_path / "t.dot")
    assert (tmp_path / "t.dot").read_text() == first
    g = parse_dot(first)
    again = export_tree(graph_to_tree(g))
    assert parse_dot(again).to_dot() == again
    # structure survives: same number of statements and the same labels in order
    assert [lab for _, lab in parse_dot(again).nodes] == [lab for _, lab in g.nodes]
    assert len(parse_dot(again).edges) == len(g.edges)


def test_parse_dot_rejects_garbage():
    with pytest.raises(DataError):
        parse_dot("digraph x {\n  n0 -> \n}\n")


# ---------------------------------------------------------------- run configs

def test_shipped_configs_validate():
    for name in ("char_lm.json", "smoke.json"):
        cfg = load_run_config(Path(__file__).resolve().parents[1] / "configs" / name)
        assert cfg.resolve(cfg.data["corpus"]).exists()


def test_config_schema_errors():
    with pytest.raises(jsonschema.ValidationError):
        parse_run_config({"data": {"corpus": "x"}, "train": {"batch_size": 0}})
    with pytest.raises(jsonschema.ValidationError):
        parse_run_config({"model": {"p": 4}})
    with pytest.raises(jsonschema.ValidationError):
        parse_run_config({"data": {"corpus": "x", "extra": 1}})


def test_relative_paths_follow_config(tmp_path):
    (tmp_path / "run.json").write_text(json.dumps({"data": {"corpus": "text.txt"}}))
    cfg = load_run_config(tmp_path / "run.json")
    assert cfg.resolve("text.txt") == tmp_path / "text.txt"
