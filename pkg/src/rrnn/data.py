"""Datasets, embeddings, tree export and run configuration."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .cell import CellTree, TreeNode

ALPHABET = " abcdefghijklmnopqrstuvwxyz"
SPACE_TOKEN = "<space>"
UNK_TOKEN = "<unk>"


class DataError(ValueError):
    pass


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("rrnn") / "fixtures" / name))


def clean_text(raw: str) -> str:
    """Lower-case, map everything outside a-z to space, squeeze spaces."""
    return re.sub(" +", " ", re.sub("[^a-z]", " ", raw.lower())).strip()


# ---------------------------------------------------------------- character corpus

@dataclass
class Corpus:
    alphabet: str
    splits: dict            # name -> (n, seq_len) int array
    offsets: dict           # name -> start offsets of each sequence in the text
    seq_len: int

    def __getitem__(self, name):
        return self.splits[name]


def encode(text: str, alphabet: str = ALPHABET, path=None) -> np.ndarray:
    lut = {c: i for i, c in enumerate(alphabet)}
    out = np.empty(len(text), dtype=np.int64)
    for k, ch in enumerate(text):
        i = lut.get(ch)
        if i is None:
            where = f"{path}: " if path else ""
            raise DataError(f"{where}symbol {ch!r} at offset {k} is outside the alphabet")
        out[k] = i
    return out


def load_char_corpus(path, seq_len: int = 20, counts=(500, 100, 100), seed: int = 0,
                     alphabet: str = ALPHABET) -> Corpus:
    """Disjoint fixed-length windows drawn without replacement, split in order train/val/test."""
    text = Path(path).read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    codes = encode(text, alphabet, path)
    n_chunks = len(codes) // seq_len
    counts = tuple(int(c) for c in counts)
    need = sum(counts)
    if need > n_chunks:
        raise DataError(f"{path}: {need} sequences of length {seq_len} requested, "
                        f"only {n_chunks} fit in {len(codes)} characters")
    rng = np.random.default_rng(seed)
    picks = rng.choice(n_chunks, size=need, replace=False)
    names = ("train", "val", "test")
    splits, offsets, s = {}, {}, 0
    for name, c in zip(names, counts):
        starts = picks[s:s + c] * seq_len
        s += c
        offsets[name] = starts
        splits[name] = (codes[starts[:, None] + np.arange(seq_len)] if c
                        else np.zeros((0, seq_len), dtype=np.int64))
    return Corpus(alphabet, splits, offsets, seq_len)


CORPUS_CACHE_VERSION = 1


def save_corpus(corpus: Corpus, path):
    """Versioned ``.npz`` cache of the splits and their text offsets."""
    arrays = {"meta": np.array(json.dumps({"version": CORPUS_CACHE_VERSION, "alphabet": corpus.alphabet,
                                           "seq_len": corpus.seq_len}))}
    for name in corpus.splits:
        arrays[f"split/{name}"] = corpus.splits[name]
        arrays[f"offset/{name}"] = corpus.offsets[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_corpus(path) -> Corpus:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CORPUS_CACHE_VERSION:
            raise DataError(f"{path}: unsupported corpus cache version {meta.get('version')}")
        names = [k.split("/", 1)[1] for k in z.files if k.startswith("split/")]
        return Corpus(meta["alphabet"], {n: z[f"split/{n}"] for n in names},
                      {n: z[f"offset/{n}"] for n in names}, meta["seq_len"])


def lm_arrays(seqs: np.ndarray, emb: np.ndarray):
    """Inputs are embeddings of symbols 1..T-1, targets are symbols 2..T."""
    seqs = np.asarray(seqs)
    return emb[seqs[:, :-1]], seqs[:, 1:]


def pad_left(seqs, length=None, pad: int = 0) -> np.ndarray:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), length), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = list(s)[-length:] if length else []
        if s:
            out[i, length - len(s):] = s
    return out


def classification_arrays(samples, table: "EmbeddingTable", length: int):
    """Left-pad each word sequence with zero vectors to ``length``; keep the last ``length`` words."""
    X = np.zeros((len(samples), length, table.p))
    for i, (_, words) in enumerate(samples):
        words = words[-length:]
        if words:
            X[i, length - len(words):] = np.stack([table[w] for w in words])
    return X, np.array([lab for lab, _ in samples], dtype=np.int64)


def load_labeled_text(path):
    """Lines ``label<TAB>text``; text split on whitespace."""
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{n}: expected 'label<TAB>text'")
        lab, txt = line.split("\t", 1)
        out.append((int(lab), txt.split()))
    return out


# ---------------------------------------------------------------- embeddings

@dataclass
class EmbeddingTable:
    vectors: dict
    p: int
    fallback: np.ndarray = None

    def __post_init__(self):
        if self.fallback is None:
            self.fallback = np.zeros(self.p)

    def __getitem__(self, token):
        return self.vectors.get(token, self.fallback)

    def matrix(self, symbols) -> np.ndarray:
        return np.stack([self[SPACE_TOKEN if s == " " else s] for s in symbols])


def load_embeddings(path, p: int) -> EmbeddingTable:
    vecs = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != p + 1:
            raise DataError(f"{path}:{n}: expected a token and {p} values, got {len(parts) - 1} values")
        try:
            vecs[parts[0]] = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
    return EmbeddingTable(vecs, p, vecs.get(UNK_TOKEN))


def write_embeddings(path, table: EmbeddingTable):
    with open(path, "w", encoding="utf-8") as fh:
        for tok, v in table.vectors.items():
            fh.write(tok + " " + " ".join(repr(float(x)) for x in v) + "\n")


def char_embeddings(p: int = 16, path=None) -> np.ndarray:
    """Embedding matrix for ALPHABET from a file (default: the bundled random table)."""
    path = fixture_path("char_emb16.txt") if path is None else path
    return load_embeddings(path, p).matrix(ALPHABET)


# ---------------------------------------------------------------- tree export

@dataclass
class TreeGraph:
    nodes: list = field(default_factory=list)   # (name, label)
    edges: list = field(default_factory=list)   # (src, dst, label)

    def to_dot(self, name="cell") -> str:
        lines = [f"digraph {name} {{"]
        lines += [f'  {n} [label="{lab}"];' for n, lab in self.nodes]
        lines += [f'  {a} -> {b} [label="{lab}"];' for a, b, lab in self.edges]
        lines.append("}")
        return "\n".join(lines) + "\n"


def tree_graph(tree: CellTree, slot_names=None) -> TreeGraph:
    """Graph of the merges under the root plus the leaves they use, in pool order."""
    slot_names = slot_names or {}
    ks = tree.reachable()
    used = set(ks)
    for k in ks:
        nd = tree.node(k)
        used.update((nd.left, nd.right))
    g = TreeGraph()
    for k in sorted(used):
        if tree.is_leaf(k):
            g.nodes.append((f"n{k}", tree.leaf_labels[k]))
        else:
            nd = tree.node(k)
            g.nodes.append((f"n{k}", f"({nd.act}, {nd.op}, b{nd.r})"))
    for k in ks:
        nd = tree.node(k)
        for side, child in (("L", nd.left), ("R", nd.right)):
            g.edges.append((f"n{child}", f"n{k}", slot_names.get((side, nd.r), f"{side}{nd.r}")))
    return g


def export_tree(tree: CellTree, path=None, slot_names=None) -> str:
    text = tree_graph(tree, slot_names).to_dot()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


_NODE = re.compile(r'^\s*(\w+)\s*\[label="([^"]*)"\];\s*$')
_EDGE = re.compile(r'^\s*(\w+)\s*->\s*(\w+)\s*\[label="([^"]*)"\];\s*$')


def parse_dot(text: str) -> TreeGraph:
    g = TreeGraph()
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("digraph") or s == "}":
            continue
        m = _EDGE.match(s)
        if m:
            g.edges.append(m.groups())
            continue
        m = _NODE.match(s)
        if m:
            g.nodes.append(m.groups())
            continue
        raise DataError(f"line {n}: cannot parse {s!r}")
    return g


_LABEL = re.compile(r"^\((\S+), (\S+), b(-?\d+|None)\)$")


def graph_to_tree(g: TreeGraph) -> CellTree:
    """Rebuild the structure (no values) of an exported tree."""
    idx = {name: int(name[1:]) for name, _ in g.nodes}
    labels = dict(g.nodes)
    internal = sorted(k for name, k in idx.items() if _LABEL.match(labels[name]))
    leaves = sorted(k for k in idx.values() if k not in internal)
    remap = {k: i for i, k in enumerate(leaves)}
    for i, k in enumerate(internal):
        remap[k] = len(leaves) + i
    children = {}
    for a, b, lab in g.edges:
        children.setdefault(idx[b], {})[lab[0]] = idx[a]
    nodes = []
    for k in internal:
        act, op, r = _LABEL.match(labels[f"n{k}"]).groups()
        ch = children[k]
        nodes.append(TreeNode(remap[ch["L"]] if "L" in ch else remap[min(ch.values())],
                              remap[ch["R"]] if "R" in ch else remap[max(ch.values())],
                              op, act, None, None if r == "None" else int(r)))
    return CellTree([labels[f"n{k}"] for k in leaves], [None] * len(leaves), nodes,
                    remap[internal[-1]] if internal else 0)


# ---------------------------------------------------------------- run configuration

RUN_SCHEMA = {
    "type": "object",
    "required": ["data"],
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["rrnn-gru", "rrnn"]},
                "p": {"type": "integer", "minimum": 1},
                "n_l": {"type": "integer", "minimum": 1},
                "hidden": {"type": "integer", "minimum": 1},
                "vocab": {"type": "integer", "minimum": 2},
                "output": {"enum": ["h-only", "concat"]},
                "task": {"enum": ["lm", "classify"]},
                "n_classes": {"type": "integer", "minimum": 2},
                "iterations": {"type": "integer", "minimum": 1},
                "activations": {"type": "array", "minItems": 1, "items": {
                    "enum": ["sigmoid", "tanh", "one-minus", "identity"]}},
                "binary_ops": {"type": "array", "minItems": 1, "items": {
                    "enum": ["add", "hadamard"]}},
                "teacher": {"type": "boolean"},
                "clamp": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "minimum": 0},
                "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "clip": {"type": "number", "exclusiveMinimum": 0},
                "alternate_every": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "train_mode": {"enum": ["hard", "soft"]},
                "soft_value": {"enum": ["mixture", "winner"]},
                "start_phase": {"enum": ["structure", "scorer"]},
                "loss": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "lambda1": {"type": "number", "minimum": 0},
                        "lambda2": {"type": "number", "minimum": 0},
                        "lambda3": {"type": "number", "minimum": 0},
                        "lambda4": {"type": "number", "minimum": 0},
                        "margin": {"type": "number", "exclusiveMinimum": 0},
                        "iso_aggregation": {"enum": ["min", "mean"]},
                        "iso_cap": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["corpus"],
            "properties": {
                "corpus": {"type": "string"},
                "val": {"type": "string"},
                "test": {"type": "string"},
                "embeddings": {"type": ["string", "null"]},
                "seq_len": {"type": "integer", "minimum": 2},
                "counts": {"type": "array", "items": {"type": "integer", "minimum": 0},
                           "minItems": 3, "maxItems": 3},
                "seed": {"type": "integer"},
            },
        },
        "out": {"type": "string"},
        "model_seed": {"type": "integer"},
    },
}


@dataclass
class RunConfig:
    model: dict
    train: dict
    data: dict
    out: str = "run"
    model_seed: int = 0
    base_dir: Path = Path(".")

    def resolve(self, p) -> Path:
        """Data paths are relative to the config file; ``fixture:NAME`` means a bundled file."""
        if p.startswith("fixture:"):
            return fixture_path(p[len("fixture:"):])
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q


def parse_run_config(doc: dict, base_dir=".") -> RunConfig:
    jsonschema.validate(doc, RUN_SCHEMA)
    return RunConfig(doc.get("model", {}), doc.get("train", {}), doc["data"],
                     doc.get("out", "run"), doc.get("model_seed", 0), Path(base_dir))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    return parse_run_config(doc, path.parent)


