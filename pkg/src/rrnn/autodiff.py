"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every op accepts ``Var`` objects or plain arrays.  When no input is a
``Var`` the op runs as ordinary numpy and returns an array, so the same
model code serves both training (recorded on a tape) and inference.

Graphs are rebuilt per sample and per timestep; nothing is cached.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

OP_KINDS = (
    "leaf", "matvec", "add", "sub", "hadamard", "neg", "scale", "sigmoid",
    "tanh", "one-minus", "identity", "exp", "log", "square", "sum",
    "reshape", "index", "stack", "concat", "einsum", "minimum", "amin",
    "amax", "clip", "softmax", "cross-entropy", "affine-scorer", "custom",
)


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, node_id, kind):
        self.node_id = node_id
        self.kind = kind
        where = "untracked op" if node_id is None else f"node {node_id}"
        super().__init__(f"{where} ({kind}) produced non-finite values")


class ContractError(RuntimeError):
    pass


class Var:
    """A node of the computation graph: forward value plus how to pull back."""

    __slots__ = ("tape", "id", "kind", "value", "inputs", "vjp",
                 "requires_grad", "name")

    def __init__(self, tape, node_id, kind, value, inputs, vjp,
                 requires_grad, name=None):
        self.tape = tape
        self.id = node_id
        self.kind = kind
        self.value = value
        self.inputs = inputs
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def parents(self):
        return [x.id for x in self.inputs if isinstance(x, Var)]

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var(id={self.id}, kind={self.kind}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)


class Tape:
    """Ordered record of graph nodes; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None, requires_grad=True) -> Var:
        value = np.array(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise NumericError(len(self.nodes), "leaf")
        var = Var(self, len(self.nodes), "leaf", value, (), None,
                  requires_grad, name)
        self.nodes.append(var)
        return var

    def constant(self, value, name=None) -> Var:
        return self.leaf(value, name=name, requires_grad=False)

    def _push(self, kind, value, inputs, vjp) -> Var:
        node_id = len(self.nodes)
        if not np.isfinite(value).all():
            raise NumericError(node_id, kind)
        needs = any(isinstance(x, Var) and x.requires_grad for x in inputs)
        var = Var(self, node_id, kind, value, tuple(inputs), vjp, needs)
        self.nodes.append(var)
        return var

    def forward_op(self, kind: str, inputs: Sequence[int], params=None) -> int:
        """Id-based entry point: apply ``kind`` to existing nodes, return the new id."""
        args = [self.nodes[i] for i in inputs]
        fn = _KIND_TABLE.get(kind)
        if fn is None:
            raise ValueError(f"unknown op kind {kind!r}")
        out = fn(*args) if params is None else fn(*args, params)
        return out.id

    def backward(self, root, seed=None, wrt: Iterable = ()) -> dict[int, np.ndarray]:
        return backward(root, seed, wrt)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _record(kind, out, inputs, vjp):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            tape = x.tape
            break
    if tape is None:
        if not np.isfinite(out).all():
            raise NumericError(None, kind)
        return out
    return tape._push(kind, out, inputs, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as exc:
        raise DimensionError(
            f"{kind}: shapes {np.shape(a)} and {np.shape(b)} are incompatible") from exc


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast("add", va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    return _record("add", va + vb, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast("sub", va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    return _record("sub", va - vb, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    """Entrywise (Hadamard) product with broadcasting."""
    va, vb = value_of(a), value_of(b)
    _check_broadcast("hadamard", va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    return _record("hadamard", va * vb, (a, b),
                   lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb)))


hadamard = mul


def neg(a):
    return _record("neg", -value_of(a), (a,), lambda g: (-g,))


def scale(a, c: float):
    return _record("scale", value_of(a) * c, (a,), lambda g: (g * c,))


def square(a):
    va = value_of(a)
    return _record("square", va * va, (a,), lambda g: (2.0 * va * g,))


# ---------------------------------------------------------------- activations

def sigmoid(a):
    va = value_of(a)
    e = np.exp(-np.abs(va))
    out = np.where(va >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(value_of(a))
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def one_minus(a):
    return _record("one-minus", 1.0 - value_of(a), (a,), lambda g: (-g,))


def identity(a):
    va = value_of(a)
    if not isinstance(a, Var):
        return va
    return _record("identity", va.copy(), (a,), lambda g: (g,))


def exp(a):
    out = np.exp(value_of(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    va = value_of(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(va)
    return _record("log", out, (a,), lambda g: (g / va,))


# ---------------------------------------------------------------- shape ops

def sum_(a, axis=None):
    va = value_of(a)
    shape = va.shape
    out = np.asarray(va.sum(axis=axis), dtype=np.float64)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _record("sum", out, (a,), vjp)


def mean(a, axis=None):
    va = value_of(a)
    n = va.size if axis is None else va.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def reshape(a, shape):
    va = value_of(a)
    old = va.shape
    return _record("reshape", va.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a, idx):
    va = value_of(a)
    out = np.array(va[idx], dtype=np.float64)

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, idx, g)
        return (full,)
    return _record("index", out, (a,), vjp)


def stack(items: Sequence, axis=0):
    vals = [value_of(x) for x in items]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from exc

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))
    return _record("stack", out, tuple(items), vjp)


def concat(items: Sequence, axis=0):
    vals = [value_of(x) for x in items]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record("concat", out, tuple(items), vjp)


# ---------------------------------------------------------------- linear algebra

def einsum(spec: str, a, b):
    """Two-operand einsum; every index must appear in at least two of the terms."""
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for ch in set(ia + ib + out_idx):
        if (ch in ia) + (ch in ib) + (ch in out_idx) < 2:
            raise ValueError(f"einsum index {ch!r} in {spec!r} is reduced by one operand only")
    va, vb = value_of(a), value_of(b)
    try:
        out = np.einsum(spec, va, vb)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec}: {exc}") from exc

    def vjp(g):
        return (np.einsum(f"{out_idx},{ib}->{ia}", g, vb),
                np.einsum(f"{ia},{out_idx}->{ib}", va, g))
    return _record("einsum", np.asarray(out, dtype=np.float64), (a, b), vjp)


def matvec(w, x):
    """``w @ x`` for a (p, q) matrix and a (q,) vector."""
    vw, vx = value_of(w), value_of(x)
    if vw.ndim != 2 or vx.ndim != 1 or vw.shape[1] != vx.shape[0]:
        raise DimensionError(f"matvec: {vw.shape} @ {vx.shape}")
    return _record("matvec", vw @ vx, (w, x),
                   lambda g: (np.outer(g, vx), vw.T @ g))


def matmul(a, b):
    """Plain 2-D matrix product."""
    va, vb = value_of(a), value_of(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise DimensionError(f"matmul: {va.shape} @ {vb.shape}")
    return _record("matvec", va @ vb, (a, b), lambda g: (g @ vb.T, va.T @ g))


# ---------------------------------------------------------------- selection / reductions

def minimum(a, c: float):
    """Entrywise min(a, c) against a constant; the gradient goes to a where a < c."""
    va = value_of(a)
    keep = va < c
    return _record("minimum", np.where(keep, va, c), (a,), lambda g: (g * keep,))


def clip(a, lo: float, hi: float):
    """Clamp into [lo, hi]; the gradient passes only where no clamping happened."""
    va = value_of(a)
    keep = (va >= lo) & (va <= hi)
    return _record("clip", np.clip(va, lo, hi), (a,), lambda g: (g * keep,))


def _extreme(kind, a, axis, pick):
    va = value_of(a)
    arg = pick(va, axis=axis)
    out = np.take_along_axis(va, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(va)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)
    return _record(kind, np.asarray(out, dtype=np.float64), (a,), vjp)


def amin(a, axis=-1):
    """Minimum along ``axis``; subgradient routed to the first minimiser."""
    return _extreme("amin", a, axis, np.argmin)


def amax(a, axis=-1):
    return _extreme("amax", a, axis, np.argmax)


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get weight exactly 0."""
    va = value_of(a)
    if mask is None:
        shifted = va - va.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        filled = np.where(mask, va, -np.inf)
        top = filled.max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, va - top, 0.0)), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _record("softmax", out, (a,), vjp)


def cross_entropy(logits, targets):
    """Per-row softmax cross-entropy in nats; ``targets`` are integer class ids."""
    z = value_of(logits)
    targets = np.asarray(targets)
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    out = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)
    return _record("cross-entropy", out, (logits,), vjp)


def custom(kind_label: str, fn: Callable, vjp_fn: Callable, *inputs):
    """Escape hatch: ``fn`` maps input values to an output, ``vjp_fn(g, *values)`` pulls back."""
    vals = [value_of(x) for x in inputs]
    out = np.asarray(fn(*vals), dtype=np.float64)
    return _record("custom", out, inputs, lambda g: vjp_fn(g, *vals))


# ---------------------------------------------------------------- reverse sweep

def backward(root: Var, seed=None, wrt: Iterable = ()) -> dict[int, np.ndarray]:
    """Propagate adjoints from ``root``.

    Returns a map from node id to gradient covering every reachable leaf that
    requires a gradient, plus any interior node listed in ``wrt``.
    """
    if not isinstance(root, Var):
        raise ContractError("backward needs a recorded Var as root")
    if seed is None:
        if root.value.size != 1:
            raise ContractError(
                f"root has shape {root.shape}; a seed is required for non-scalar roots")
        seed = np.ones_like(root.value)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != root.shape:
            raise ContractError(f"seed shape {seed.shape} != root shape {root.shape}")
    tape = root.tape
    wanted = {w.id if isinstance(w, Var) else int(w) for w in wrt}
    for w in wanted:
        if w > root.id:
            raise ContractError(f"node {w} was created after the root and cannot reach it")
    stop = min(wanted) if wanted else 0
    adj = {root.id: seed}
    grads: dict[int, np.ndarray] = {}
    nodes = tape.nodes
    for i in range(root.id, stop - 1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if i in wanted or (node.kind == "leaf" and node.requires_grad):
            grads[i] = g
        if node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not isinstance(inp, Var) or not inp.requires_grad:
                continue
            prev = adj.get(inp.id)
            adj[inp.id] = gi if prev is None else prev + gi
    for w in wanted:
        grads.setdefault(w, np.zeros_like(nodes[w].value))
    return grads


def jacobian(out: Var, inp: Var) -> np.ndarray:
    """Dense Jacobian d out / d inp, one backward sweep per output entry."""
    if inp.id > out.id:
        raise ContractError("input node is not an ancestor of the output")
    n_out = out.value.size
    rows = []
    for k in range(n_out):
        seed = np.zeros(n_out)
        seed[k] = 1.0
        g = backward(out, seed.reshape(out.shape), wrt=[inp])[inp.id]
        rows.append(g.ravel())
    return np.array(rows)


def power_iteration(matvec_fn, rmatvec_fn, n: int, max_iter=100, tol=1e-8, seed=0):
    """Largest singular value of an operator given ``A v`` and ``A^T u``.

    Returns ``(sigma, converged)``; the Rayleigh quotient of ``A^T A`` is
    monitored for a relative change below ``tol``.
    """
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    prev = None
    for _ in range(max_iter):
        w = rmatvec_fn(matvec_fn(v))
        rq = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        v = w / nw
        if prev is not None and abs(rq - prev) <= tol * max(abs(rq), 1e-300):
            return float(np.sqrt(max(rq, 0.0))), True
        prev = rq
    return float(np.sqrt(max(prev, 0.0))), False


def spectral_norm(mat: np.ndarray, max_iter=100, tol=1e-8) -> float:
    """Spectral norm by power iteration, with an SVD fallback for small matrices."""
    mat = np.asarray(mat, dtype=np.float64)
    sigma, ok = power_iteration(lambda v: mat @ v, lambda u: mat.T @ u,
                                mat.shape[1], max_iter, tol)
    if not ok and max(mat.shape) <= 16:
        return float(np.linalg.svd(mat, compute_uv=False)[0])
    return sigma


def jacobian_norm(out: Var, inp: Var, max_iter=100, tol=1e-8):
    """Spectral norm of d out / d inp.  Returns ``(norm, converged)``."""
    J = jacobian(out, inp)
    sigma, ok = power_iteration(lambda v: J @ v, lambda u: J.T @ u,
                                J.shape[1], max_iter, tol)
    if not ok and max(J.shape) <= 16:
        return float(np.linalg.svd(J, compute_uv=False)[0]), True
    return sigma, ok


_KIND_TABLE: dict[str, Callable] = {
    "matvec": matvec, "add": add, "sub": sub, "hadamard": mul, "neg": neg,
    "scale": scale, "sigmoid": sigmoid, "tanh": tanh, "one-minus": one_minus,
    "identity": identity, "exp": exp, "log": log, "square": square,
    "sum": sum_, "softmax": softmax, "minimum": minimum, "amin": amin,
    "amax": amax,
}
