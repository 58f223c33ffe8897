import csv
import json
import os

import numpy as np
import pytest

from hgrl.cli import main, parse_values, UsageError
from hgrl.config import from_flat
from hgrl.dataio import load_dataset
from hgrl.pipeline import StageError, evaluate, inspect, read_matrix, run_pipeline

FAST = ["ctsa.epochs=3", "shapelets.epochs=5", "shapelets.K=6", "gat.epochs=20", "gat.hidden=8"]


def _fast_flags():
    out = []
    for item in FAST:
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("data") / "synth")
    assert main(["synth", "--out", d, "--per-class", "6", "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run") / "r")
    assert main(["train", "--dataset", data_dir, "--out", out, "--seed", "2", *_fast_flags()]) == 0
    return out


def test_synth_round_trip_and_repeatability(data_dir, tmp_path):
    ds = load_dataset(data_dir)
    np.testing.assert_array_equal(np.bincount(ds.labels), [6, 6, 6])
    again = str(tmp_path / "again")
    main(["synth", "--out", again, "--per-class", "6", "--seed", "1"])
    for name in sorted(os.listdir(data_dir)):
        with open(os.path.join(data_dir, name)) as a, open(os.path.join(again, name)) as b:
            assert a.read() == b.read()


def test_synth_default_histogram(tmp_path):
    main(["synth", "--out", str(tmp_path / "d")])
    np.testing.assert_array_equal(np.bincount(load_dataset(str(tmp_path / "d")).labels), [20, 20, 20])


def test_train_writes_every_artifact(run_dir):
    for name in ("config.json", "mask.csv", "ctsa_params.json", "representations.csv", "distance.csv",
                 "similarity.csv", "shapelets.csv", "positioning.csv", "shapelet_bank.json",
                 "graph/adjacency.csv", "graph/layout.json", "gat_checkpoint.json", "predictions.csv",
                 "losses.json", "metrics.json"):
        assert os.path.exists(os.path.join(run_dir, name)), name
    with open(os.path.join(run_dir, "metrics.json")) as fh:
        m = json.load(fh)
    assert 0 <= m["accuracy"] <= 1 and m["loss"] == "nll"
    assert {"accuracy", "n_labeled", "n_unlabeled", "per_stage_seconds", "config_echo"} <= set(m)
    assert m["n_labeled"] + m["n_unlabeled"] == 18
    assert set(m["per_stage_seconds"]) == {"load", "ctsa", "softdtw", "shapelets", "graph", "gat", "predict"}
    assert m["config_echo"]["seed"] == 2 and m["config_echo"]["gat.hidden"] == 8


def test_eval_matches_training_metrics(run_dir, capsys):
    with open(os.path.join(run_dir, "metrics.json")) as fh:
        m = json.load(fh)
    res = evaluate(run_dir)
    assert res["accuracy"] == m["accuracy"] and res["n_unlabeled"] == m["n_unlabeled"]
    assert main(["eval", run_dir]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == m["accuracy"]


def test_eval_scores_only_masked_series(run_dir):
    ds = load_dataset(json.load(open(os.path.join(run_dir, "config.json")))["dataset_dir"])
    with open(os.path.join(run_dir, "mask.csv")) as fh:
        mask = np.array([int(r[1]) for r in csv.reader(fh)]) == 1
    with open(os.path.join(run_dir, "predictions.csv")) as fh:
        pred = np.array([int(r["predicted"]) for r in csv.DictReader(fh)])
    assert ds.labeled_mask.all()            # every label is known on disk
    expected = (pred[~mask] == ds.labels[~mask]).mean()
    assert evaluate(run_dir)["accuracy"] == pytest.approx(expected)


def test_eval_corrupted_checkpoint(run_dir, tmp_path):
    import shutil
    bad = str(tmp_path / "bad")
    shutil.copytree(run_dir, bad)
    with open(os.path.join(bad, "gat_checkpoint.json"), "w") as fh:
        fh.write("{not json")
    with pytest.raises(StageError, match="eval"):
        evaluate(bad)
    assert main(["eval", bad]) == 2


def test_inspect_targets(run_dir, tmp_path):
    g = inspect(run_dir, "graph", str(tmp_path / "g"))
    assert sorted(os.path.basename(p) for p in g) == ["adjacency.csv", "layout.json"]
    s = inspect(run_dir, "shapelets", str(tmp_path / "s"))
    with open(s[0]) as fh:
        header = next(csv.reader(fh))
    assert header[:4] == ["id", "scale", "length", "v_0"]
    a = inspect(run_dir, "attention", str(tmp_path / "a"))
    with open(a[0]) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        vals = [float(r[k]) for k in ("mts", "subject", "shapelet")]
        assert np.nansum(vals) == pytest.approx(1.0, abs=1e-6)
    assert len(inspect(run_dir, "similarity", str(tmp_path / "m"))) == 2
    with pytest.raises(ValueError):
        inspect(run_dir, "everything")
    assert main(["inspect", run_dir, "everything"]) == 1


def test_graph_export_matches_layout(run_dir):
    A = read_matrix(os.path.join(run_dir, "graph", "adjacency.csv"))
    with open(os.path.join(run_dir, "graph", "layout.json")) as fh:
        lay = json.load(fh)
    assert A.shape == (lay["n_mts"] + lay["n_sub"] + lay["n_shp"],) * 2
    assert np.array_equal(A, A.T)


def test_af_shaped_train_exports_44_nodes(tmp_path):
    data = str(tmp_path / "af")
    main(["synth", "--out", data, "--per-class", "10"])
    out = str(tmp_path / "run")
    flags = _fast_flags() + ["--set", "shapelets.K=4", "--set", "shapelets.tau_sim=0"]
    assert main(["train", "--dataset", data, "--out", out, *flags]) == 0
    assert read_matrix(os.path.join(out, "graph", "adjacency.csv")).shape == (44, 44)


def test_rerun_same_seed_identical(data_dir, tmp_path):
    flat = {"dataset_dir": data_dir, "seed": 4}
    flat.update({k: json.loads(v) for k, v in (s.split("=") for s in FAST)})
    a = run_pipeline(from_flat(dict(flat, out_dir=str(tmp_path / "a"))))
    b = run_pipeline(from_flat(dict(flat, out_dir=str(tmp_path / "b"))))
    strip = lambda m: {k: v for k, v in m.items() if k not in ("per_stage_seconds", "config_echo")}
    assert strip(a.metrics) == strip(b.metrics)
    for name in ("predictions.csv", "gat_checkpoint.json", "graph/adjacency.csv", "similarity.csv"):
        with open(os.path.join(a.out_dir, name)) as fa, open(os.path.join(b.out_dir, name)) as fb:
            assert fa.read() == fb.read(), name


def test_sweep_rows(data_dir, tmp_path, capsys):
    out = str(tmp_path / "sw")
    code = main(["sweep", "--dataset", data_dir, "--out", out, *_fast_flags(),
                 "--key", "gat.variant", "--values", "full,gcn"])
    assert code == 0
    with open(os.path.join(out, "sweep.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["gat.variant"] for r in rows] == ["full", "gcn"]
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_usage_errors(data_dir, capsys):
    assert main(["sweep", "--dataset", data_dir, "--key", "shapelets.K", "--values", "[]"]) == 1
    assert main(["train", "--dataset", data_dir, "--set", "gat.nope=1"]) == 1
    assert main(["train"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["--help"]) == 0


def test_stage_failure_exit_code(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2


def test_parse_values():
    assert parse_values("32, 64,128") == [32, 64, 128]
    assert parse_values('["full", "gcn"]') == ["full", "gcn"]
    assert parse_values("full,node_only") == ["full", "node_only"]
    with pytest.raises(UsageError):
        parse_values(" , ")
