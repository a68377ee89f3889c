import json

import numpy as np
import pytest

from divts.cli import main
from divts.data import load_dataset, save_dataset

SMALL = ["--subjects", "1", "--target-subjects", "1", "--series-length", "544"]
FAST = ["--rounds", "2", "--e2", "1", "--e3", "1", "--e4", "1"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(d), "--domains", "3", "--classes", "4", "--seed", "7"] + SMALL) == 0
    return d


@pytest.fixture(scope="module")
def runs(synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for alg in ("diversify", "erm"):
        rd = root / alg
        assert main(["train", "--data", str(synth_dir / "train"), "--algorithm", alg, "--run-dir", str(rd),
                     "--seed", "1"] + FAST) == 0
        out[alg] = rd
    return out


def test_synth_contract_and_determinism(synth_dir, tmp_path):
    for part in ("train", "target"):
        man = json.loads((synth_dir / part / "manifest.json").read_text())
        assert man["channels"] == 3
    cfg = json.loads((synth_dir / "synth_config.json").read_text())
    assert cfg["K_true"] == 3 and cfg["C"] == 4 and cfg["seed"] == 7
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--domains", "3", "--classes", "4", "--seed", "7"] + SMALL) == 0
    for part in ("train", "target"):
        for f in sorted((synth_dir / part).iterdir()):
            assert f.read_bytes() == (again / part / f.name).read_bytes()


def test_synth_invalid_config_exit_code(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--domains", "0"]) == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_synth_config_file_with_flag_precedence(tmp_path):
    cfgf = tmp_path / "s.json"
    cfgf.write_text(json.dumps({"C": 3, "seed": 2, "subjects_per_domain": 1, "target_subjects": 1,
                                "series_length": 544}))
    assert main(["synth", "--out", str(tmp_path / "o"), "--config", str(cfgf), "--classes", "2"]) == 0
    cfg = json.loads((tmp_path / "o" / "synth_config.json").read_text())
    assert cfg["C"] == 2 and cfg["seed"] == 2


def test_train_run_dirs(runs):
    assert runs["diversify"] != runs["erm"]
    for alg, rd in runs.items():
        for f in ("config.json", "history.json", "split.json", "checkpoint/model.pt", "checkpoint/model.json"):
            assert (rd / f).exists(), f
        hist = json.loads((rd / "history.json").read_text())
        assert len(hist["rounds"]) == 2
        assert json.loads((rd / "config.json").read_text())["rounds"] == 2
        assert not list(rd.glob("*.tmp"))
    assign = json.loads((runs["diversify"] / "assignments.json").read_text())
    n_train = len(json.loads((runs["diversify"] / "split.json").read_text())["train_idx"])
    assert len(assign["final"]) == n_train and len(assign["selected"]) == n_train
    for h in json.loads((runs["diversify"] / "history.json").read_text())["rounds"]:
        assert len(h["assignments"]) == n_train


def test_train_bad_data_exit_code(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--run-dir", str(tmp_path / "r")] + FAST) == 3
    assert "data error" in capsys.readouterr().err


def test_train_bad_schedule_exit_code(synth_dir, tmp_path):
    assert main(["train", "--data", str(synth_dir / "train"), "--run-dir", str(tmp_path / "r"),
                 "--rounds", "50", "--e2", "5"]) == 2


def test_k_grid(synth_dir, tmp_path):
    rd = tmp_path / "grid"
    assert main(["train", "--data", str(synth_dir / "train"), "--run-dir", str(rd), "--k-grid", "2:3",
                 "--rounds", "1", "--e2", "1", "--e3", "1", "--e4", "1"]) == 0
    grid = json.loads((rd / "grid.json").read_text())
    assert set(grid["val_acc"]) == {"2", "3"}
    assert grid["val_acc"][str(grid["best_K"])] == max(grid["val_acc"].values())
    assert json.loads((rd / "config.json").read_text())["K"] == grid["best_K"]
    assert main(["train", "--data", str(synth_dir / "train"), "--run-dir", str(rd), "--k-grid", "0:12"]) == 2


def test_detect_and_eval(runs, synth_dir, tmp_path, capsys):
    rd = runs["diversify"]
    res = tmp_path / "all.json"
    assert main(["detect", "--run", str(rd), "--data", str(synth_dir / "target"), "--scorer", "all",
                 "--out", str(res)]) == 0
    assert (rd / "gaussian_stats.json").exists()
    recs = json.loads(res.read_text())
    target = load_dataset(synth_dir / "target")
    assert len(recs) == 3 * len(target)
    assert {r["scorer"] for r in recs} == {"mcp", "mah", "odin"}
    assert all({"id", "scorer", "score", "pred_class", "is_ood_true", "is_id"} <= set(r) for r in recs)

    res2 = tmp_path / "again.json"
    assert main(["detect", "--run", str(rd), "--data", str(synth_dir / "target"), "--scorer", "all",
                 "--out", str(res2)]) == 0
    assert res.read_bytes() == res2.read_bytes()

    out = tmp_path / "ev"
    assert main(["eval", "--results", str(res), "--data", str(synth_dir / "target"), "--run", str(rd),
                 "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["primary_scorer"] == "mah"
    for sc in ("mah", "mcp", "odin"):
        assert set(m["per_scorer"][sc]) == {"id_acc", "auroc", "aupr", "n_id", "n_ood"}
        assert 0 <= m["per_scorer"][sc]["auroc"] <= 1
    assert 0 <= m["domain_agreement"] <= 1
    assert "mean_pairwise" in m["h_div"]
    assert (out / "metrics.csv").read_text().splitlines()[0] == "scorer,id_acc,auroc,aupr,n_id,n_ood"
    assert "scorer" in capsys.readouterr().out


def test_odin_eps0_equals_mcp(runs, synth_dir, tmp_path):
    rd = runs["erm"]
    a, b = tmp_path / "odin.json", tmp_path / "mcp.json"
    assert main(["detect", "--run", str(rd), "--data", str(synth_dir / "target"), "--scorer", "odin",
                 "--eps", "0", "--temp", "1", "--out", str(a)]) == 0
    assert main(["detect", "--run", str(rd), "--data", str(synth_dir / "target"), "--scorer", "mcp",
                 "--out", str(b)]) == 0
    ra, rb = json.loads(a.read_text()), json.loads(b.read_text())
    for x, y in zip(ra, rb):
        x.pop("scorer"), y.pop("scorer")
        assert x == y


def test_detect_missing_checkpoint(tmp_path, synth_dir):
    assert main(["detect", "--run", str(tmp_path), "--data", str(synth_dir / "target")]) == 3


def test_eval_perfect_scorer_and_missing_truth(synth_dir, tmp_path):
    target = load_dataset(synth_dir / "target")
    recs = [{"id": i, "scorer": "mcp", "score": 0.0 if o else 1.0, "pred_class": int(y)}
            for i, (o, y) in enumerate(zip(target.is_ood, target.y))]
    rp = tmp_path / "perfect.json"
    rp.write_text(json.dumps(recs))
    assert main(["eval", "--results", str(rp), "--data", str(synth_dir / "target"), "--out", str(tmp_path / "p")]) == 0
    m = json.loads((tmp_path / "p" / "metrics.json").read_text())
    assert m["auroc"] == 1.0 and m["aupr"] == 1.0 and m["id_acc"] == 1.0

    no_truth = target.subset(np.arange(len(target)))
    no_truth.ood_classes = frozenset()
    save_dataset(no_truth, tmp_path / "nt")
    assert main(["eval", "--results", str(rp), "--data", str(tmp_path / "nt"), "--out", str(tmp_path / "q")]) == 0
    m = json.loads((tmp_path / "q" / "metrics.json").read_text())
    assert "auroc" not in m and m["id_acc"] is not None

    bad = tmp_path / "bad.json"
    bad.write_text('{"not": "a list"}')
    assert main(["eval", "--results", str(bad), "--data", str(synth_dir / "target")]) == 3
