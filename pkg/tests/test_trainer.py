import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrnn.data import lm_arrays
from rrnn.trainer import (METRIC_COLUMNS, Adam, Model, ModelConfig, TrainConfig, TrainingAborted,
                          accuracy, bpc, clip_gradients, evaluate, global_norm, load_checkpoint,
                          ne_slope, perplexity, read_metrics_csv, save_checkpoint, train)

STRUCT = ("L", "R", "b")


def _tiny(seed=0, n=12, T=6, n_l=2):
    rng = np.random.default_rng(seed)
    seqs = rng.integers(0, 27, (n, T + 1))
    emb = rng.uniform(-1, 1, (27, 4))
    X, Y = lm_arrays(seqs, emb)
    model = Model(ModelConfig(p=4, n_l=n_l, hidden=4, vocab=27), seed=seed)
    return model, (X[: n - 4], Y[: n - 4]), (X[n - 4:], Y[n - 4:])


def _cfg(**kw):
    base = dict(batch_size=4, lr=1e-2, epochs=2, alternate_every=1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- metrics

def test_uniform_predictor_bpc():
    z = np.zeros((50, 27))
    y = np.random.default_rng(0).integers(0, 27, 50)
    assert bpc(z, y) == pytest.approx(math.log2(27), rel=1e-14)
    assert perplexity(z, y) == pytest.approx(27, rel=1e-13)


def test_perfect_predictor():
    y = np.arange(27)
    z = np.zeros((27, 27))
    z[y, y] = 1e3
    assert bpc(z, y) == 0.0 and accuracy(z, y) == 1.0


def test_random_three_class_accuracy():
    rng = np.random.default_rng(1)
    n = 3000
    labels = np.repeat(np.arange(3), n // 3)
    acc = accuracy(rng.normal(size=(n, 3)), labels)
    # three standard errors of a Bernoulli(1/3) mean
    assert abs(acc - 1 / 3) < 3 * math.sqrt(2 / 9 / n)


# ---------------------------------------------------------------- clipping and the optimiser

def test_clip_examples():
    g = {"a": np.array([3.0, 4.0])}
    out, norm = clip_gradients(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(out["a"], [0.6, 0.8], rtol=1e-15)
    small = {"a": np.array([0.3, 0.4])}
    out, _ = clip_gradients(small, 1.0)
    np.testing.assert_array_equal(out["a"], small["a"])
    with pytest.raises(ValueError):
        clip_gradients(g, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 10))
def test_clip_properties(seed, scale):
    rng = np.random.default_rng(seed)
    g = {k: scale * rng.normal(size=rng.integers(1, 5, 2)) for k in "abc"}
    out, norm = clip_gradients(g, 1.0)
    assert abs(global_norm(out) - min(norm, 1.0)) <= 1e-12
    for k in g:
        assert np.all(np.abs(out[k]) <= np.abs(g[k]))


def test_adam_first_step():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -4.0, 1e-3])
    opt = Adam(0.1)
    opt.step(p, {"w": g})
    # bias correction makes the first step lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], [1.0, -2.0, 0.5] - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-14)


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(clip=0.0), dict(alternate_every=0), dict(lr_decay=0.0),
                dict(start_phase="both")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- training loop

def test_zero_learning_rate_leaves_params():
    model, tr, va = _tiny()
    before = {k: v.copy() for k, v in model.params.items()}
    train(model, tr, va, _cfg(lr=0.0, epochs=3))
    for k, v in before.items():
        assert v.tobytes() == model.params[k].tobytes()


@pytest.mark.parametrize("start,frozen", [("scorer", STRUCT), ("structure", ("scorer.",))])
def test_phase_freezes_the_other_group(start, frozen):
    model, tr, va = _tiny(1)
    before = {k: v.copy() for k, v in model.params.items()}
    res = train(model, tr, va, _cfg(epochs=1, start_phase=start))
    assert res.metrics[0].phase == start
    moved = {k for k in before if before[k].tobytes() != model.params[k].tobytes()}
    for k in before:
        if k in frozen or any(k.startswith(f) for f in frozen if f.endswith(".")):
            assert k not in moved
    assert "out.W" in moved


def test_phases_alternate():
    model, tr, va = _tiny(2)
    res = train(model, tr, va, _cfg(epochs=4, alternate_every=2))
    assert [m.phase for m in res.metrics] == ["structure", "structure", "scorer", "scorer"]


def test_single_tuple_trains_jointly():
    model, tr, va = _tiny(3, n_l=1)
    res = train(model, tr, va, _cfg(epochs=2))
    assert {m.phase for m in res.metrics} == {"joint"}
    # with one tuple there is nothing to change
    assert [m.N_e for m in res.metrics] == [None, 0]


def test_determinism_and_metrics_csv(tmp_path):
    runs = []
    for i in range(2):
        model, tr, va = _tiny(4)
        path = tmp_path / f"m{i}.csv"
        train(model, tr, va, _cfg(epochs=3), metrics_path=path)
        rows = read_metrics_csv(path)
        assert list(rows[0]) == list(METRIC_COLUMNS)
        runs.append([{k: v for k, v in r.items() if k != "wall_ms"} for r in rows])
    assert runs[0] == runs[1]
    assert runs[0][0]["N_e"] == "" and runs[0][1]["N_e"] != ""


def test_checkpoint_round_trip(tmp_path):
    model, tr, va = _tiny(5)
    ck = tmp_path / "best.npz"
    res = train(model, tr, va, _cfg(epochs=3), checkpoint_path=ck)
    params, meta = load_checkpoint(ck)
    assert meta["epoch"] == res.best_epoch and meta["metric"] == res.best_metric
    assert evaluate(model, params, *va) == meta["metric"]
    for k, v in res.best_params.items():
        assert v.tobytes() == params[k].tobytes()


def test_checkpoint_version_checked(tmp_path):
    ck = tmp_path / "x.npz"
    save_checkpoint(ck, {"w": np.ones(2)}, {})
    params, meta = load_checkpoint(ck)
    assert params["w"].tolist() == [1.0, 1.0]
    import json
    with np.load(ck) as z:
        arrays = dict(z)
    arrays["meta"] = np.array(json.dumps(dict(meta, version=-1)))
    np.savez(tmp_path / "y.npz", **arrays)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "y.npz")


def test_empty_splits_rejected():
    model, tr, va = _tiny(6)
    with pytest.raises(ValueError):
        evaluate(model, model.params, va[0][:0], va[1][:0])
    with pytest.raises(ValueError):
        train(model, tr, (va[0][:0], va[1][:0]), _cfg())


def test_non_finite_loss_aborts_with_last_good():
    model, tr, va = _tiny(7)
    model.params["out.b"][0] = np.inf
    with pytest.raises(TrainingAborted) as info:
        train(model, tr, va, _cfg())
    err = info.value
    assert err.dump["epoch"] == 1 and err.dump["batch_start"] == 0
    assert np.isinf(err.params["out.b"][0])      # nothing better was ever reached


def test_ne_slope():
    assert ne_slope([None, 9, 9, 9, 8, 6, 4, 2]) == pytest.approx(-2.0)
    assert ne_slope([None, 1, 1, 1, 5, 5, 5], start_epoch=5) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        ne_slope([None, 3, 2], start_epoch=5)
