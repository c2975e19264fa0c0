import json
import math
import subprocess
import sys

import numpy as np
import pytest

from jetrec.cli import main
from jetrec.datagen import read_jsonl
from jetrec.evaluation import read_roc_csv, rejection_at
from jetrec.model import load_checkpoint, save_checkpoint


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("generate", "--out", d / "jets.jsonl", "--n-jets", 200, "--seed", 3, "--n-max", 15) == 0
    return d / "jets.jsonl"


def test_generate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--out", tmp_path / f"{name}.jsonl", "--n-jets", 100, "--seed", 7) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.config.json").exists()
    assert len(read_jsonl(tmp_path / "a.jsonl")) == 100


def test_generate_empty(tmp_path):
    assert run("generate", "--out", tmp_path / "e.jsonl", "--n-jets", 0) == 0
    assert (tmp_path / "e.jsonl").read_bytes() == b""


def test_resolved_config_round_trips(tmp_path):
    assert run("generate", "--out", tmp_path / "a.jsonl", "--n-jets", 20, "--seed", 4) == 0
    resolved = tmp_path / "a.config.json"
    assert run("--config", resolved, "generate", "--out", tmp_path / "b.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gen": {"n_jets": 5, "bogus": 1}}))
    assert run("--config", cfg, "generate", "--out", tmp_path / "x.jsonl") == 2
    assert "gen.bogus" in capsys.readouterr().err
    cfg.write_text(json.dumps({"nonsense": {}}))
    assert run("--config", cfg, "generate", "--out", tmp_path / "x.jsonl") == 2
    assert run("generate", "--out", tmp_path / "x.jsonl", "--pt-mean", -1) == 2
    assert "pt_mean" in capsys.readouterr().err
    cfg.write_text(json.dumps({"gen": {"n_jets": "ten"}}))
    assert run("--config", cfg, "generate", "--out", tmp_path / "x.jsonl") == 2


def test_cluster_outputs(tmp_path, small_data):
    for alpha in (-1, 0, 1):
        out = tmp_path / f"a{alpha}"
        assert run("cluster", "--in", small_data, "--alpha", alpha, "--out", out) == 0
        rows = (out / "tree_stats.csv").read_text().splitlines()
        assert rows[0] == "index,label,n_leaves,depth,imbalance" and len(rows) == 201
        for r in rows[1:]:
            _, _, n, depth, _ = r.split(",")
            assert int(depth) >= math.ceil(math.log2(int(n)))
        trees = [json.loads(l) for l in (out / "trees.jsonl").read_text().splitlines()]
        assert all(len(t["nodes"]) == 2 * t["n_leaves"] - 1 for t in trees)
        assert json.loads((out / "config.json").read_text())["cluster"]["alpha"] == alpha


def test_cluster_random_deterministic(tmp_path, small_data):
    for name in ("a", "b"):
        assert run("cluster", "--in", small_data, "--topology", "random", "--seed", 2, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "trees.jsonl").read_bytes() == (tmp_path / "b" / "trees.jsonl").read_bytes()


def test_cluster_empty_record_exit_3(tmp_path, capsys):
    p = tmp_path / "d.jsonl"
    p.write_text('{"label":0,"particles":[[1.0,1.0,0.0,0.0]]}\n{"label":1,"particles":[]}\n')
    assert run("cluster", "--in", p, "--out", tmp_path / "o") == 3
    assert "line 2" in capsys.readouterr().err


def test_data_errors_exit_3(tmp_path, capsys):
    p = tmp_path / "d.jsonl"
    p.write_text('{"label":0,"particles":[[1.0,1.0,0.0,0.0]]}\nnot json\n')
    assert run("cluster", "--in", p, "--out", tmp_path / "o") == 3
    assert "line 2" in capsys.readouterr().err
    assert run("cluster", "--in", tmp_path / "missing.jsonl", "--out", tmp_path / "o") == 3


def _train(tmp_path, data, name, *extra):
    ckpt = tmp_path / f"{name}.json"
    code = run("train", "--data", data, "--q", 4, "--epochs", 2, "--batch-size", 32,
               "--out-checkpoint", ckpt, *extra)
    return code, ckpt


def test_train_and_evaluate(tmp_path, small_data, capsys):
    code, ckpt = _train(tmp_path, small_data, "m")
    assert code == 0
    out = capsys.readouterr().out
    final = float(out.strip().splitlines()[-1].split()[-1])
    hist = (tmp_path / "m.history.csv").read_text().splitlines()
    assert hist[0] == "epoch,loss,val_auc" and len(hist) == 3
    assert float(hist[-1].split(",")[2]) == final
    assert run("evaluate", "--data", tmp_path / "m.val.jsonl", "--checkpoint", ckpt,
               "--roc-out", tmp_path / "roc.csv") == 0
    lines = capsys.readouterr().out.splitlines()
    auc = float(lines[0].split()[1])
    assert abs(auc - final) <= 1e-12
    curve = read_roc_csv(tmp_path / "roc.csv")
    assert curve.auc == auc
    printed = lines[1].split()[1]
    expected = rejection_at(curve, 0.5)
    assert (printed == "inf" and expected == math.inf) or float(printed) == expected


def test_train_lr_zero_keeps_init(tmp_path, small_data):
    _, a = _train(tmp_path, small_data, "lr0", "--lr", 0)
    _, b = _train(tmp_path, small_data, "init", "--epochs", 0)
    ma, mb = load_checkpoint(a)[0].arrays(), load_checkpoint(b)[0].arrays()
    assert all(np.array_equal(ma[k], mb[k]) for k in ma)


def test_train_reruns_identical(tmp_path, small_data):
    _train(tmp_path, small_data, "r1")
    _train(tmp_path, small_data, "r2")
    for suffix in (".json", ".history.csv", ".val.jsonl"):
        assert (tmp_path / f"r1{suffix}").read_bytes() == (tmp_path / f"r2{suffix}").read_bytes()


def test_train_exit_codes(tmp_path, small_data):
    ones = tmp_path / "ones.jsonl"
    ones.write_text("".join(l + "\n" for l in small_data.read_text().splitlines() if l.startswith('{"label":1')))
    assert _train(tmp_path, ones, "x")[0] == 4
    assert _train(tmp_path, small_data, "y", "--lr", -1)[0] == 2
    assert _train(tmp_path, small_data, "z", "--lr", 1e300)[0] == 4
    assert not (tmp_path / "z.json").exists()


def test_evaluate_single_class_exit_5(tmp_path, small_data):
    _, ckpt = _train(tmp_path, small_data, "m")
    ones = tmp_path / "ones.jsonl"
    ones.write_text("".join(l + "\n" for l in small_data.read_text().splitlines() if l.startswith('{"label":1')))
    assert run("evaluate", "--data", ones, "--checkpoint", ckpt, "--roc-out", tmp_path / "r.csv") == 5


def test_zeroed_head_gives_chance_auc(tmp_path, capsys):
    data = tmp_path / "big.jsonl"
    run("generate", "--out", data, "--n-jets", 2000, "--seed", 1, "--n-max", 10)
    _, ckpt = _train(tmp_path, data, "m", "--epochs", 0)
    model, hist = load_checkpoint(ckpt)
    model.head = {k: np.zeros_like(v) for k, v in model.head.items()}
    save_checkpoint(model, ckpt, hist)
    capsys.readouterr()
    assert run("evaluate", "--data", data, "--checkpoint", ckpt, "--roc-out", tmp_path / "r.csv") == 0
    auc = float(capsys.readouterr().out.splitlines()[0].split()[1])
    assert abs(auc - 0.5) <= 0.03


def test_threads_do_not_change_outputs(tmp_path, small_data):
    for t in (1, 8):
        assert run("--threads", t, "cluster", "--in", small_data, "--topology", "random",
                   "--out", tmp_path / f"c{t}") == 0
        assert run("--threads", t, "train", "--data", small_data, "--q", 4, "--epochs", 1,
                   "--topology", "random", "--out-checkpoint", tmp_path / f"m{t}.json") == 0
    for name in ("trees.jsonl", "tree_stats.csv"):
        assert (tmp_path / "c1" / name).read_bytes() == (tmp_path / "c8" / name).read_bytes()
    for suffix in (".json", ".history.csv", ".val.jsonl"):
        assert (tmp_path / f"m1{suffix}").read_bytes() == (tmp_path / f"m8{suffix}").read_bytes()
    # resolved configs differ only in the output paths they record
    for a, b in ((tmp_path / "c1" / "config.json", tmp_path / "c8" / "config.json"),
                 (tmp_path / "m1.config.json", tmp_path / "m8.config.json")):
        ca, cb = json.loads(a.read_text()), json.loads(b.read_text())
        ca.pop("paths"), cb.pop("paths")
        assert ca == cb


def test_threads_env_fallback(tmp_path, small_data, monkeypatch):
    monkeypatch.setenv("JETREC_THREADS", "0")
    assert run("cluster", "--in", small_data, "--out", tmp_path / "o") == 2


def test_bench_csv(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert run("bench", "--mode", "batched-forward", "--n", 20, "--particles", 8, "--repeat", 2, "--out", out) == 0
    assert "within" in capsys.readouterr().err
    lines = out.read_text().splitlines()
    assert lines[0] == "mode,n,mean_ns,p50,p95"
    assert [l.split(",")[0] for l in lines[1:]] == ["batched-forward", "per-tree-forward"]
    assert run("bench", "--mode", "clustering", "--n", 4, 8, "--jets", 3, "--repeat", 1) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "jetrec.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
