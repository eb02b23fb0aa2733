import json
import re
import shutil
from pathlib import Path

import pytest

from rrnn import cli
from rrnn.data import fixture_path
from rrnn.trainer import load_checkpoint, read_metrics_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert cli.main(["train", "--config", str(CONFIGS / "smoke.json"), "--out", str(out)]) == 0
    return out


# ---------------------------------------------------------------- usage errors

@pytest.mark.parametrize("argv", [
    ["train", "--config", "missing.cfg"],
    ["train"],
    ["replicate", "--variant", "rnn"],
    ["replicate", "--variant", "gru", "--seeds", "0"],
    ["enumerate-trees", "--n", "1"],
    ["enumerate-trees", "--n", "9", "--c0", "0.2"],
    ["evaluate", "--checkpoint", "nope.npz", "--data", "x"],
    ["frobnicate"],
    [],
])
def test_usage_errors_exit_two(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and err.startswith("error:")


def test_invalid_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"corpus": "x"}, "train": {"clip": -1}}))
    code, _, err = run(capsys, "train", "--config", str(bad))
    assert code == 2 and "invalid config" in err


def test_failed_check_exits_one(monkeypatch, capsys):
    import rrnn.oracles
    monkeypatch.setattr(rrnn.oracles, "run_all",
                        lambda *a, **k: [("fd", True, "ok"), ("td", False, "3 mismatches")])
    code, out, _ = run(capsys, "oracle")
    assert code == 1 and "FAIL td" in out


# ---------------------------------------------------------------- checks

def test_replicate_gru(capsys, tmp_path):
    code, out, _ = run(capsys, "replicate", "--variant", "gru", "--seeds", "50", "--dim", "4",
                       "--out", str(tmp_path / "gru.csv"))
    assert code == 0
    assert len(re.findall(r"^  k=\d ", out, re.M)) == 50 * 8
    assert out.strip().endswith("PASS")
    assert len((tmp_path / "gru.csv").read_text().strip().splitlines()) == 1 + 50 * 8


def test_replicate_lstm(capsys):
    code, out, _ = run(capsys, "replicate", "--variant", "lstm", "--seeds", "3", "--dim", "3")
    assert code == 0 and "6 transcripts" in out


@pytest.mark.parametrize("n,lhs", [("1", "0.6"), ("2", "0.48")])
def test_enumerate_trees(capsys, n, lhs):
    code, out, _ = run(capsys, "enumerate-trees", "--n", n, "--c0", "0.3")
    assert code == 0 and f"lhs={lhs} " in out and "bound holds" in out


def test_oracle_small(capsys):
    code, out, _ = run(capsys, "oracle", "--fd-cases", "3", "--td-pairs", "20")
    assert code == 0
    assert len([ln for ln in out.splitlines() if ln.startswith("PASS")]) == 3


def test_export_replication_tree(capsys, tmp_path):
    code, out, _ = run(capsys, "export-tree")
    assert code == 0 and out.startswith("digraph") and "W_r'" in out
    code, _, _ = run(capsys, "export-tree", "--out", str(tmp_path / "t.dot"))
    assert code == 0 and (tmp_path / "t.dot").read_text() == out


# ---------------------------------------------------------------- train and friends

def test_train_writes_outputs(smoke_run):
    rows = read_metrics_csv(smoke_run / "metrics.csv")
    assert len(rows) == 3
    params, meta = load_checkpoint(smoke_run / "best.npz")
    assert meta["model"]["n_l"] == 3 and "L" in params


def test_seed_reproduces(tmp_path):
    outs = []
    for i in range(2):
        d = tmp_path / str(i)
        assert cli.main(["train", "--config", str(CONFIGS / "smoke.json"), "--out", str(d),
                         "--seed", "7"]) == 0
        rows = read_metrics_csv(d / "metrics.csv")
        outs.append(([{k: v for k, v in r.items() if k != "wall_ms"} for r in rows],
                     {k: v.tobytes() for k, v in load_checkpoint(d / "best.npz")[0].items()}))
    assert outs[0] == outs[1]


def test_evaluate(capsys, smoke_run):
    code, out, _ = run(capsys, "evaluate", "--checkpoint", str(smoke_run / "best.npz"),
                       "--data", str(fixture_path("public_domain.txt")))
    assert code == 0
    m = re.search(r"val bpc (\S+)", out)
    _, meta = load_checkpoint(smoke_run / "best.npz")
    assert float(m.group(1)) == pytest.approx(meta["metric"], abs=5e-7)


def test_diagnose(capsys, smoke_run, tmp_path):
    code, out, _ = run(capsys, "diagnose", "--checkpoint", str(smoke_run / "best.npz"),
                       "--data", str(fixture_path("public_domain.txt")),
                       "--out", str(tmp_path / "d.csv"))
    assert code == 0 and "verdict:" in out
    assert (tmp_path / "d.csv").read_text().startswith("name,value,source,threshold,verdict")


def test_export_from_checkpoint(capsys, smoke_run):
    code, out, _ = run(capsys, "export-tree", "--checkpoint", str(smoke_run / "best.npz"),
                       "--data", str(fixture_path("public_domain.txt")), "--sample", "1",
                       "--step", "2")
    assert code == 0 and out.count("->") == 16
    code, _, err = run(capsys, "export-tree", "--checkpoint", str(smoke_run / "best.npz"),
                       "--data", str(fixture_path("public_domain.txt")), "--step", "99")
    assert code == 2 and "out of range" in err


def test_declared_outputs_only(tmp_path, monkeypatch):
    cfg = tmp_path / "smoke.json"
    shutil.copy(CONFIGS / "smoke.json", cfg)
    doc = json.loads(cfg.read_text())
    doc["data"]["corpus"] = str(fixture_path("public_domain.txt"))
    cfg.write_text(json.dumps(doc))
    monkeypatch.chdir(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--out", "o"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["o", "smoke.json"]
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["best.npz", "metrics.csv"]
