"""Training loop for tree-structured recurrent models.

Alternates between updating the weight tuples and the scorer, keeps the
output layer training throughout, clips the global gradient norm, and
records per-epoch metrics, tuple-choice churn and the best checkpoint.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .cell import OpCatalog, SelectionMode
from .engine import (MultiStateConfig, OutputLayer, STRUCTURE_PARAMS, forward_gru_variant,
                     forward_sequence, gru_target_variants, init_params, tuple_change_count,
                     bind)
from .reference import GRU_NAMES, gru_target_tree, random_weights
from .scorer import NeuralScorer
from .tree_loss import (LossConfig, _compile_cached, l2_penalty,
                        score_margin, td_apply)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["epoch", "loss_task", "loss_tree", "loss_margin", "loss_l2", "val_metric",
                  "N_e", "max_grad_norm", "wall_ms"]
LN2 = np.log(2.0)


class TrainingAborted(RuntimeError):
    def __init__(self, msg, params=None, dump=None):
        super().__init__(msg)
        self.params = params
        self.dump = dump


@dataclass
class ModelConfig:
    kind: str = "rrnn-gru"            # or "rrnn"
    p: int = 16
    n_l: int = 4
    hidden: int = 64
    vocab: int = 27
    output: str = "h-only"
    task: str = "lm"                  # "lm" or "classify"
    n_classes: int = 3
    iterations: int = 8
    activations: tuple = ("sigmoid", "tanh", "one-minus", "identity")
    binary_ops: tuple = ("add", "hadamard")
    teacher: bool = True
    clamp: float = 10.0


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 1.0             # per-epoch multiplier
    epochs: int = 30
    clip: float = 1.0
    alternate_every: int = 5
    seed: int = 0
    temperature: float = 1.0
    train_mode: str = "soft"
    soft_value: str = "winner"
    start_phase: str = "structure"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not self.clip > 0:
            raise ValueError("clip threshold must be positive")
        if self.alternate_every < 1:
            raise ValueError("alternate_every must be >= 1")
        if self.start_phase not in ("structure", "scorer"):
            raise ValueError("start_phase must be 'structure' or 'scorer'")


class Model:
    """Parameters plus the frozen teacher that supplies target tree vectors."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params=None, teacher=None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        n_out = cfg.vocab if cfg.task == "lm" else cfg.n_classes
        self.output = OutputLayer(cfg.output)
        self.params = params if params is not None else init_params(
            cfg.p, cfg.n_l, cfg.hidden, n_out, self.output.in_dim(cfg.p), rng)
        trng = np.random.default_rng([seed, 7919])
        self.teacher = teacher if teacher is not None else (
            random_weights(GRU_NAMES, cfg.p, trng, 1.0 / np.sqrt(cfg.p)) if cfg.teacher else None)
        self.catalog = OpCatalog(tuple(cfg.activations), tuple(cfg.binary_ops))

    @property
    def has_choice(self):
        return self.cfg.n_l >= 2 or self.cfg.kind == "rrnn"

    def phase_params(self, phase: str):
        names = list(self.params)
        if not self.has_choice:
            return [n for n in names if not n.startswith("scorer.")]
        if phase == "structure":
            return [n for n in names if n in STRUCTURE_PARAMS or n.startswith("out.")]
        return [n for n in names if n.startswith("scorer.") or n.startswith("out.")]


# ---------------------------------------------------------------- metrics

def bpc(logits, targets) -> float:
    """Mean cross-entropy in bits over all predicted symbols."""
    ce = ad.cross_entropy(np.asarray(logits), np.asarray(targets))
    return float(np.mean(ce) / LN2)


def perplexity(logits, targets) -> float:
    return float(np.exp(np.mean(ad.cross_entropy(np.asarray(logits), np.asarray(targets)))))


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(np.asarray(logits), axis=-1) == np.asarray(labels)))


# ---------------------------------------------------------------- optimisation pieces

def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict, threshold: float):
    """Scale every gradient by threshold / g when the global norm g exceeds threshold."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    g = global_norm(grads)
    if g > threshold:
        s = threshold / g
        return {k: v * s for k, v in grads.items()}, g
    return dict(grads), g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params: dict, grads: dict):
        for k, g in grads.items():
            t = self.t.get(k, 0) + 1
            self.t[k] = t
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.beta1 ** t)
            vh = v / (1 - self.beta2 ** t)
            params[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------- batch losses

@dataclass
class BatchOutput:
    total: object
    task: float
    tree: float
    margin: float
    l2: float
    choices: np.ndarray | None
    logits: list


def _variant_loss(model: Model, bp, X, Y, cfg: TrainConfig, mode: SelectionMode) -> BatchOutput:
    lc = cfg.loss
    res = forward_gru_variant(X, bp, mode=mode, teacher=model.teacher, output=model.output,
                              clamp=model.cfg.clamp, margin_M=lc.margin,
                              td_agg=lc.iso_aggregation, iso_cap=lc.iso_cap)
    B = X.shape[0]
    if model.cfg.task == "lm":
        ce = [ad.cross_entropy(z, Y[:, t]) for t, z in enumerate(res.logits)]
        task = ad.sum_(ad.stack(ce, axis=1), axis=1)
    else:
        task = ad.cross_entropy(res.logits[-1], Y)
    tree = res.td if res.td is not None else np.zeros(B)
    return _assemble(task, tree, res.margin, bp, lc, res.choices, res.logits)


def _assemble(task, tree, margin, bp, lc: LossConfig, choices, logits) -> BatchOutput:
    l2 = l2_penalty(bp)
    mt, mtr, mm = ad.mean(task), ad.mean(tree), ad.mean(margin)
    total = ad.add(ad.add(ad.scale(mt, lc.lambda1), ad.scale(mtr, lc.lambda2)),
                   ad.add(ad.scale(mm, lc.lambda3), ad.scale(l2, lc.lambda4)))
    f = lambda x: float(ad.value_of(x))  # noqa: E731
    return BatchOutput(total, f(mt), f(mtr), f(mm), f(l2), choices, logits)


def gru_tree_distance(tree, teacher, x, h_prev, lc: LossConfig):
    """Tree distance of a general predicted cell tree to the teacher GRU tree."""
    hm = tree.heap_map()
    slots = {k: s for s, k in enumerate(sorted(set(hm.values())))}
    pred_map = tuple((hh, slots[k]) for hh, k in hm.items())
    tgt = gru_target_tree(teacher, np.asarray(x), np.asarray(ad.value_of(h_prev)))
    prog = _compile_cached(pred_map, gru_target_variants(lc.iso_cap))
    stack = ad.stack([tree.value(k) for k in sorted(slots)], axis=0)
    tv = np.stack([nd.value for nd in tgt.nodes])
    return td_apply(ad.reshape(stack, (1,) + np.shape(ad.value_of(stack))), tv[None], prog,
                    lc.iso_aggregation)


def _rrnn_loss(model: Model, bp, X, Y, cfg: TrainConfig, mode: SelectionMode) -> BatchOutput:
    lc = cfg.loss
    scorer = NeuralScorer.from_params(bp)
    ms = MultiStateConfig.single(model.cfg.iterations)
    tasks, trees, margins = [], [], []
    for i in range(X.shape[0]):
        res = forward_sequence(X[i], bp, model.catalog, scorer, ms, mode, output=model.output)
        if model.cfg.task == "lm":
            task = ad.sum_(ad.stack([ad.cross_entropy(z, Y[i, t]) for t, z in enumerate(res.logits)]))
        else:
            task = ad.cross_entropy(res.logits[-1], Y[i])
        pairs = [pr for mt in res.margins for ml in mt for pr in ml]
        margin = score_margin(pairs, lc.margin)
        td = 0.0
        if model.teacher is not None:
            for t in range(X.shape[1]):
                td = ad.add(td, ad.sum_(gru_tree_distance(res.trees[t][0], model.teacher, X[i, t],
                                                 res.states[t][0], lc)))
        tasks.append(task)
        trees.append(td if not isinstance(td, float) else np.float64(td))
        margins.append(margin if not isinstance(margin, float) else np.float64(margin))
    out = _assemble(ad.stack(tasks), ad.stack(trees), ad.stack(margins), bp, lc, None, [])
    return out


def batch_loss(model: Model, bp, X, Y, cfg: TrainConfig, mode: SelectionMode) -> BatchOutput:
    if model.cfg.kind == "rrnn-gru":
        return _variant_loss(model, bp, X, Y, cfg, mode)
    return _rrnn_loss(model, bp, X, Y, cfg, mode)


# ---------------------------------------------------------------- evaluation

def predict_logits(model: Model, params, X, chunk: int = 512):
    """Hard-selection logits, no tape.  Returns ``(n, T, V)``."""
    X = np.asarray(X, dtype=np.float64)
    outs = []
    if model.cfg.kind == "rrnn-gru":
        for s in range(0, len(X), chunk):
            res = forward_gru_variant(X[s:s + chunk], params, mode=SelectionMode("hard"),
                                      output=model.output, clamp=model.cfg.clamp)
            outs.append(np.stack(res.logits, axis=1))
        return np.concatenate(outs)
    scorer = NeuralScorer.from_params(params)
    ms = MultiStateConfig.single(model.cfg.iterations)
    for x in X:
        res = forward_sequence(x, params, model.catalog, scorer, ms, SelectionMode("hard"),
                               output=model.output)
        outs.append(np.stack(res.logits))
    return np.stack(outs)


def evaluate(model: Model, params, X, Y, task: str | None = None) -> float:
    """BPC for language modelling, accuracy for classification, perplexity on request."""
    task = task or ("bpc" if model.cfg.task == "lm" else "accuracy")
    if len(X) == 0:
        raise ValueError("cannot evaluate on an empty split")
    Z = predict_logits(model, params, X)
    if task == "accuracy":
        return accuracy(Z[:, -1], Y)
    V = Z.shape[-1]
    if task == "perplexity":
        return perplexity(Z.reshape(-1, V), np.asarray(Y).reshape(-1))
    return bpc(Z.reshape(-1, V), np.asarray(Y).reshape(-1))


# ---------------------------------------------------------------- checkpoints and CSV

def save_checkpoint(path, params: dict, meta: dict):
    meta = dict(meta, version=CHECKPOINT_VERSION)
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True, default=_json_default))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"not serialisable: {type(o)}")


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: np.array(z[k]) for k in z.files if k.startswith("param/")}
    return params, meta


@dataclass
class EpochMetrics:
    epoch: int
    loss_task: float
    loss_tree: float
    loss_margin: float
    loss_l2: float
    val_metric: float
    N_e: int | None
    max_grad_norm: float
    wall_ms: float
    phase: str = "structure"

    def row(self):
        return [self.epoch, f"{self.loss_task:.10g}", f"{self.loss_tree:.10g}",
                f"{self.loss_margin:.10g}", f"{self.loss_l2:.10g}", f"{self.val_metric:.10g}",
                "" if self.N_e is None else self.N_e, f"{self.max_grad_norm:.10g}",
                f"{self.wall_ms:.1f}"]


def write_metrics_csv(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow(m.row())


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    metrics: list
    best_params: dict
    best_metric: float
    best_epoch: int
    final_params: dict
    choice_logs: list = field(default_factory=list)

    @property
    def n_e(self):
        return [m.N_e for m in self.metrics]


def _better(task, a, b):
    return a > b if task == "accuracy" else a < b


def train(model: Model, train_data, val_data, cfg: TrainConfig, checkpoint_path=None,
          metrics_path=None, keep_choice_logs=False, meta=None) -> TrainResult:
    """Fit ``model.params`` in place; returns metrics and the best parameters by validation."""
    Xtr, Ytr = (np.asarray(a) for a in train_data)
    Xva, Yva = (np.asarray(a) for a in val_data)
    n = len(Xtr)
    if n == 0 or len(Xva) == 0:
        raise ValueError("train and validation splits must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    mode = SelectionMode(cfg.train_mode, cfg.temperature, cfg.soft_value)
    task = "bpc" if model.cfg.task == "lm" else "accuracy"
    metrics, logs = [], []
    prev_log = None
    best = (None, None, 0)
    last_good = {k: v.copy() for k, v in model.params.items()}
    first = cfg.start_phase
    other = "scorer" if first == "structure" else "structure"
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = cfg.lr * cfg.lr_decay ** (epoch - 1)
        phase = first if ((epoch - 1) // cfg.alternate_every) % 2 == 0 else other
        phase = phase if model.has_choice else "joint"
        names = model.phase_params(phase)
        perm = rng.permutation(n)
        sums = np.zeros(4)
        max_g = 0.0
        choice_log = None
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            tape = ad.Tape()
            try:
                bp = bind(model.params, tape, names)
                out = batch_loss(model, bp, Xtr[idx], Ytr[idx], cfg, mode)
                bad = None if np.isfinite(ad.value_of(out.total)) else "non-finite loss"
                parts = [out.task, out.tree, out.margin, out.l2]
            except ad.NumericError as exc:
                bad, parts = f"non-finite value: {exc}", None
            if bad is not None:
                model.params.update(last_good)
                raise TrainingAborted(bad, last_good,
                                      {"epoch": epoch, "batch_start": s, "parts": parts})
            grads_by_id = ad.backward(out.total)
            grads = {k: grads_by_id.get(bp[k].id, np.zeros_like(model.params[k])) for k in names}
            grads, g = clip_gradients(grads, cfg.clip)
            max_g = max(max_g, g)
            opt.step(model.params, grads)
            sums += np.array([out.task, out.tree, out.margin, out.l2]) * len(idx)
            if out.choices is not None:
                if choice_log is None:
                    choice_log = np.zeros((n,) + out.choices.shape[1:], dtype=np.int64)
                choice_log[idx] = out.choices
        last_good = {k: v.copy() for k, v in model.params.items()}
        val = evaluate(model, model.params, Xva, Yva, task)
        n_e = None
        if choice_log is not None:
            if prev_log is not None:
                n_e = tuple_change_count(choice_log, prev_log)
            prev_log = choice_log
            if keep_choice_logs:
                logs.append(choice_log)
        m = EpochMetrics(epoch, *(sums / n), val, n_e, max_g,
                         (time.perf_counter() - t0) * 1000.0, phase)
        metrics.append(m)
        log.info("epoch %d phase=%s loss_task=%.4f val=%.4f N_e=%s", epoch, phase,
                 m.loss_task, val, n_e)
        if best[0] is None or _better(task, val, best[0]):
            best = (val, {k: v.copy() for k, v in model.params.items()}, epoch)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best[1],
                                dict(meta or {}, epoch=epoch, metric=val, task=task,
                                     model=asdict(model.cfg), train=asdict(cfg)))
        if metrics_path is not None:
            write_metrics_csv(metrics_path, metrics)
    return TrainResult(metrics, best[1], best[0], best[2],
                       {k: v.copy() for k, v in model.params.items()}, logs)


def ne_slope(n_e, start_epoch=5):
    """Least-squares slope of N_e against epoch over epochs >= ``start_epoch``."""
    pts = [(e, v) for e, v in enumerate(n_e, start=1) if e >= start_epoch and v is not None]
    if len(pts) < 2:
        raise ValueError("need at least two N_e values for a slope")
    e, v = np.array(pts, dtype=np.float64).T
    return float(np.polyfit(e, v, 1)[0])
