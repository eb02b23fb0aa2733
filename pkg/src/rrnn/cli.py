"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage error (bad flag, missing file).
``RRNN_THREADS`` caps the BLAS thread pools; it must be read before numpy loads.
"""
from __future__ import annotations

import os

if os.environ.get("RRNN_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["RRNN_THREADS"])

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import jsonschema  # noqa: E402
import numpy as np  # noqa: E402

from . import autodiff as ad  # noqa: E402
from . import data as dio  # noqa: E402

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _existing(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} file not found: {path}")
    return p


# ---------------------------------------------------------------- shared loading

def _embedding_matrix(path, p):
    if path is None:
        if p != 16:
            raise UsageError(f"the bundled embedding table has p=16; pass --embeddings for p={p}")
        return dio.char_embeddings(16)
    return dio.load_embeddings(_existing(path, "embeddings"), p).matrix(dio.ALPHABET)


def _lm_splits(corpus_path, data_cfg, emb):
    c = dio.load_char_corpus(corpus_path, data_cfg.get("seq_len", 20),
                             data_cfg.get("counts", (500, 100, 100)), data_cfg.get("seed", 0))
    return {k: dio.lm_arrays(v, emb) if len(v) else None for k, v in c.splits.items()}


def _classify_splits(rc, model_cfg):
    table = dio.load_embeddings(_existing(rc.resolve(rc.data["embeddings"]), "embeddings"),
                                model_cfg.p)
    length = rc.data.get("seq_len", 20)
    out = {}
    for split, key in (("train", "corpus"), ("val", "val"), ("test", "test")):
        if key in rc.data:
            out[split] = dio.classification_arrays(
                dio.load_labeled_text(_existing(rc.resolve(rc.data[key]), key)), table, length)
    return out


def _model_config(d):
    from .trainer import ModelConfig
    d = dict(d)
    for k in ("activations", "binary_ops"):
        if k in d:
            d[k] = tuple(d[k])
    return ModelConfig(**d)


# ---------------------------------------------------------------- commands

def cmd_train(args):
    from .trainer import Model, TrainConfig, TrainingAborted, train
    path = _existing(args.config, "config")
    try:
        rc = dio.load_run_config(path)
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise UsageError(f"invalid config {path}: {getattr(exc, 'message', exc)}") from exc
    mcfg = _model_config(rc.model)
    tdict = dict(rc.train)
    if args.seed is not None:
        tdict["seed"] = args.seed
    if args.mode is not None:
        tdict["train_mode"] = args.mode
    if args.temperature is not None:
        tdict["temperature"] = args.temperature
    tcfg = TrainConfig(**tdict)
    model_seed = rc.model_seed if args.seed is None else args.seed
    if mcfg.task == "lm":
        corpus = Path(args.data) if args.data else rc.resolve(rc.data["corpus"])
        _existing(corpus, "data")
        emb_path = args.embeddings or (str(rc.resolve(rc.data["embeddings"]))
                                       if rc.data.get("embeddings") else None)
        splits = _lm_splits(corpus, rc.data, _embedding_matrix(emb_path, mcfg.p))
    else:
        splits = _classify_splits(rc, mcfg)
    out = Path(args.out or rc.resolve(rc.out))
    out.mkdir(parents=True, exist_ok=True)
    model = Model(mcfg, seed=model_seed)
    meta = {"data": {k: v for k, v in rc.data.items()}, "model_seed": model_seed}
    try:
        res = train(model, splits["train"], splits["val"], tcfg, out / "best.npz",
                    out / "metrics.csv", meta=meta)
    except TrainingAborted as exc:
        print(f"training aborted: {exc} {exc.dump}")
        return EXIT_FAIL
    for m in res.metrics:
        print(f"epoch {m.epoch:3d} {m.phase:<9s} task={m.loss_task:.4f} val={m.val_metric:.4f} "
              f"N_e={'' if m.N_e is None else m.N_e}")
    print(f"best val {res.best_metric:.4f} at epoch {res.best_epoch}; "
          f"checkpoint {out / 'best.npz'}; metrics {out / 'metrics.csv'}")
    return EXIT_OK


def _load_model(ckpt_path):
    from .trainer import Model, load_checkpoint
    params, meta = load_checkpoint(_existing(ckpt_path, "checkpoint"))
    return Model(_model_config(meta["model"]), params=params, teacher={}), meta


def cmd_evaluate(args):
    from .trainer import evaluate
    model, meta = _load_model(args.checkpoint)
    if model.cfg.task != "lm":
        raise UsageError("evaluate supports language-model checkpoints; use train for classification")
    data_cfg = dict(meta.get("data", {}))
    corpus = _existing(args.data, "data")
    splits = _lm_splits(corpus, data_cfg, _embedding_matrix(args.embeddings, model.cfg.p))
    for name in ("val", "test"):
        if splits.get(name) is not None:
            X, Y = splits[name]
            print(f"{name} bpc {evaluate(model, model.params, X, Y, 'bpc'):.6f} "
                  f"perplexity {evaluate(model, model.params, X, Y, 'perplexity'):.6f}")
    return EXIT_OK


def cmd_replicate(args):
    from .replication import replicate, write_csv
    if args.seeds < 1 or args.dim < 1:
        raise UsageError("--seeds and --dim must be positive")
    trs, reseeds = replicate(args.variant, args.seeds, args.dim, start=args.seed or 0)
    for t in trs:
        print(t.to_text())
    ok = all(t.passed() for t in trs)
    worst = max(t.max_deviation for t in trs)
    print(f"{args.variant}: {args.seeds} seeds, {len(trs)} transcripts, reseeds {reseeds}, "
          f"max deviation {worst:.3e}: {'PASS' if ok else 'FAIL'}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_csv(trs, fh)
    return EXIT_OK if ok else EXIT_FAIL


def _diagnostic_batch(model, X, n_samples):
    """Trees, state Jacobian series and dE_t/dh_t norms for the first samples."""
    from .cell import SelectionMode
    from .diagnostics import measure_state_jacobians
    from .engine import MultiStateConfig, bind, forward_gru_variant, forward_sequence, variant_tree
    from .scorer import NeuralScorer
    trees, series, grads = [], [], []
    for i in range(min(n_samples, len(X))):
        tape = ad.Tape()
        bp = bind(model.params, tape, [])
        h0 = tape.leaf(np.zeros((1, model.cfg.p)), name="h0")
        if model.cfg.kind == "rrnn-gru":
            res = forward_gru_variant(X[i:i + 1], bp, mode=SelectionMode("hard"), h0=h0,
                                      output=model.output, clamp=model.cfg.clamp, keep_nodes=True)
            trees += [variant_tree(res, X[i:i + 1], 0, t) for t in range(X.shape[1])]
            hs = res.states[1:]
        else:
            h0 = tape.leaf(np.zeros(model.cfg.p), name="h0")
            res = forward_sequence(X[i], bp, model.catalog, NeuralScorer.from_params(bp),
                                   MultiStateConfig.single(model.cfg.iterations),
                                   SelectionMode("hard"), h0=[h0], output=model.output)
            trees += [tt[0] for tt in res.trees]
            hs = [s[0] for s in res.states[1:]]
        series.append(measure_state_jacobians([h0] + hs))
        W = np.asarray(model.params["out.W"])
        for z in res.logits:
            pz = np.exp(np.asarray(ad.value_of(z)) - np.max(ad.value_of(z)))
            pz /= pz.sum()
            grads.append(W[:, -model.cfg.p:].T @ pz.ravel())
    return trees, series, grads


def cmd_diagnose(args):
    from .diagnostics import estimate_constants
    model, meta = _load_model(args.checkpoint)
    corpus = _existing(args.data, "data")
    splits = _lm_splits(corpus, dict(meta.get("data", {})),
                        _embedding_matrix(args.embeddings, model.cfg.p))
    X = (splits.get("val") or splits["train"])[0]
    trees, series, grads = _diagnostic_batch(model, X, 4)
    rep = estimate_constants(model.params, trees, model.catalog, state_grads=grads)
    rep.state_norms = series[0].norms
    print(rep.to_text())
    print(f"chained |dh_T/dh_1| {series[0].chained[-1]:.3e}, rate {series[0].rate:.4f}")
    if args.out:
        Path(args.out).write_text(rep.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_enumerate(args):
    from .diagnostics import DiagnosticsError, verify_path_bound
    if args.n is None or args.c0 is None:
        raise UsageError("--n and --c0 are required")
    try:
        r = verify_path_bound(args.n, args.c0)
    except DiagnosticsError as exc:
        raise UsageError(str(exc)) from exc
    print(r.to_text())
    return EXIT_OK if r.holds and r.holds_eta else EXIT_FAIL


def cmd_export(args):
    if args.checkpoint is None:
        from .replication import GRU_SLOT_NAMES, run_gru_replication
        tree = run_gru_replication(args.dim or 4, args.seed or 0).tree
        slot_names = GRU_SLOT_NAMES
    else:
        from .cell import SelectionMode
        from .engine import MultiStateConfig, forward_gru_variant, forward_sequence, variant_tree
        from .scorer import NeuralScorer
        model, meta = _load_model(args.checkpoint)
        splits = _lm_splits(_existing(args.data, "data"), dict(meta.get("data", {})),
                            _embedding_matrix(args.embeddings, model.cfg.p))
        X = (splits.get("val") or splits["train"])[0]
        i, t = args.sample, args.step
        if not (0 <= i < len(X) and 0 <= t < X.shape[1]):
            raise UsageError(f"--sample/--step out of range ({len(X)} samples, {X.shape[1]} steps)")
        if model.cfg.kind == "rrnn-gru":
            res = forward_gru_variant(X[i:i + 1], model.params, mode=SelectionMode("hard"),
                                      clamp=model.cfg.clamp, keep_nodes=True)
            tree = variant_tree(res, X[i:i + 1], 0, t)
        else:
            res = forward_sequence(X[i][:t + 1], model.params, model.catalog,
                                   NeuralScorer.from_params(model.params),
                                   MultiStateConfig.single(model.cfg.iterations), SelectionMode("hard"))
            tree = res.trees[t][0]
        slot_names = None
    text = dio.export_tree(tree, args.out, slot_names)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args):
    from .oracles import run_all
    results = run_all(args.fd_cases, args.td_pairs, seed=args.seed or 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL


# ---------------------------------------------------------------- parser

def build_parser():
    ap = _Parser(prog="rrnn", description="Tree-structured recurrent cells: training, "
                 "replication, diagnostics and oracle checks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--embeddings")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("hard", "soft"))
    p.add_argument("--temperature", type=float)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="BPC and perplexity of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--embeddings")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("replicate", help="reproduce GRU / LSTM cells with the greedy builder")
    p.add_argument("--variant", choices=("gru", "lstm"), required=True)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_replicate)

    p = sub.add_parser("diagnose", help="gradient diagnostics report for a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--embeddings")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("enumerate-trees", help="check the path-sum bound over all tree shapes")
    p.add_argument("--n", type=int)
    p.add_argument("--c0", type=float)
    p.set_defaults(fn=cmd_enumerate)

    p = sub.add_parser("export-tree", help="write one cell tree as a DOT graph")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--embeddings")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("oracle", help="run the brute-force oracle suites")
    p.add_argument("--seed", type=int)
    p.add_argument("--fd-cases", type=int, default=100)
    p.add_argument("--td-pairs", type=int, default=200)
    p.set_defaults(fn=cmd_oracle)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except dio.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
