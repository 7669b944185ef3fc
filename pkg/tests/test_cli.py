import csv
import json
import subprocess

import numpy as np
import pytest
import yaml

from survae import cli
from survae.data import load_dataset, load_schema
from survae.model import SurvaeConfig

FAST = ["--latent-dim", "2", "--hidden-width", "8", "--max-epochs", "4", "--patience", "4", "--batch-size", "32"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--n", "300", "--seed", "3", "--out", str(d / "s.csv")]) == 0
    return d


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_outputs(synth):
    data = load_dataset(synth / "s.csv", synth / "s.schema.yaml")
    truth = json.loads((synth / "s.truth.json").read_text())
    assert len(data) == 300
    assert abs(truth["censored_fraction"] - 0.3) <= 0.02
    assert len(truth["true_lambda"]) == 300
    assert 0.5 < truth["oracle_c_index"] <= 1.0 and truth["oracle_ibs"] > 0
    assert load_schema(synth / "s.schema.yaml").names == ["x0", "x1", "x2", "x3", "x4"]


def test_train_then_eval_reproduces_metrics(synth, tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = _run(["train", "--data", str(synth / "s.csv"), "--schema", str(synth / "s.schema.yaml"),
                       "--out", str(out), "--test-fraction", "0.2", *FAST], capsys)
    assert code == 0
    for name in ("model.json", "history.json", "metrics.json", "test.csv"):
        assert (out / name).exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["epochs"] == 4

    code, _, _ = _run(["eval", "--data", str(out / "test.csv"), "--schema", str(synth / "s.schema.yaml"),
                       "--model", str(out / "model.json"), "--out", str(tmp_path / "ev")], capsys)
    assert code == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["c_index"] == metrics["test"]["c_index"]
    assert report["ibs"] == metrics["test"]["ibs"]
    assert report["time_unit"] == "units"
    with open(tmp_path / "ev" / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == report["n_subjects"]
    assert all(float(r["lambda"]) > 0 and float(r["alpha"]) > 0 for r in rows)


def test_eval_oracle_predictions(tmp_path, capsys):
    schema = tmp_path / "s.yaml"
    schema.write_text(yaml.safe_dump({"features": [{"name": "x", "kind": "real"}], "time_unit": "days"}))
    times = np.arange(1, 41) * 1.5
    with open(tmp_path / "d.csv", "w") as fh:
        fh.write("x,time,event\n" + "".join(f"{i},{t},1\n" for i, t in enumerate(times)))
    with open(tmp_path / "p.csv", "w") as fh:
        fh.write("alpha,lambda\n" + "".join(f"1.0,{t}\n" for t in times))
    code, out, _ = _run(["eval", "--data", str(tmp_path / "d.csv"), "--schema", str(schema),
                         "--predictions", str(tmp_path / "p.csv")], capsys)
    assert code == 0
    assert json.loads(out)["c_index"] == 1.0


def test_eval_argument_errors(synth, capsys):
    code, _, err = _run(["eval", "--data", str(synth / "s.csv"), "--schema", str(synth / "s.schema.yaml")], capsys)
    assert code == 2 and "exactly one" in err


def test_bad_data_exit_code(tmp_path, synth, capsys):
    bad = tmp_path / "bad.csv"
    lines = (synth / "s.csv").read_text().splitlines()
    lines[7] = lines[7].rsplit(",", 1)[0] + ",2"
    bad.write_text("\n".join(lines) + "\n")
    code, _, err = _run(["train", "--data", str(bad), "--schema", str(synth / "s.schema.yaml"), *FAST], capsys)
    assert code == 2 and "row 7" in err


def test_cv_outputs_and_determinism(synth, tmp_path, capsys):
    args = ["cv", "--data", str(synth / "s.csv"), "--schema", str(synth / "s.schema.yaml"),
            "--k", "2", "--seeds", "2", "--best", "1", *FAST]
    assert _run(args + ["--out", str(tmp_path / "a")], capsys)[0] == 0
    assert _run(args + ["--out", str(tmp_path / "b")], capsys)[0] == 0
    a = (tmp_path / "a" / "results.json").read_text()
    assert a == (tmp_path / "b" / "results.json").read_text()
    res = json.loads(a)
    assert res["status"] == "complete" and len(res["runs"]) == 4 and len(res["folds"]) == 2
    assert res["config"]["model"]["latent_dim"] == 2
    s = res["summary"]["c_index"]
    assert s["min"] <= s["mean"] <= s["max"]
    assert "wall_clock_seconds" in json.loads((tmp_path / "a" / "run_meta.json").read_text())


def test_cv_parallel_matches_serial(synth, tmp_path, capsys):
    args = ["cv", "--data", str(synth / "s.csv"), "--schema", str(synth / "s.schema.yaml"),
            "--k", "2", "--seeds", "2", "--best", "1", *FAST]
    _run(args + ["--out", str(tmp_path / "a")], capsys)
    _run(args + ["--out", str(tmp_path / "b"), "--jobs", "2"], capsys)
    assert (tmp_path / "a" / "results.json").read_text() == (tmp_path / "b" / "results.json").read_text()


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"k": 3, "model": {"latent_dim": 4, "lr": 0.01}, "hidden_width": 9}))
    args = cli.build_parser().parse_args(["cv", "--config", str(cfg), "--latent-dim", "6"])
    monkeypatch.setenv("SURVAE_OUTPUT_DIR", str(tmp_path / "env-out"))
    keys = ["data", "k", "output_dir"]
    out = cli._resolve(args, keys, {"output_dir": cli._default_out(), "k": 5})
    assert out["k"] == 3
    assert out["output_dir"] == str(tmp_path / "env-out")
    assert out["model"] == SurvaeConfig(latent_dim=6, lr=0.01, hidden_width=9)


def _fold_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "dataset", "fold", "c_index", "ibs"])
        w.writerows(rows)


def test_compare_against_itself(tmp_path, capsys):
    vals = [(0, 0.61, 0.2), (1, 0.66, 0.18), (2, 0.64, 0.19)]
    rows = [(m, ds, f, c, i) for m in ("SURVAE", "COPY") for ds in ("a", "b") for f, c, i in vals]
    _fold_csv(tmp_path / "ext.csv", rows)
    code, out, _ = _run(["compare", "--external", str(tmp_path / "ext.csv"), "--out", str(tmp_path)], capsys)
    assert code == 0 and "tie rule" in out
    rep = json.loads((tmp_path / "compare.json").read_text())
    assert rep["mrr"]["c_index"]["SURVAE"] == rep["mrr"]["c_index"]["COPY"] == 1.0
    assert rep["p_values"]["c_index"]["COPY"] == {"a": 0.5, "b": 0.5}
    assert rep["p_values"]["ibs"]["COPY"] == {"a": 0.5, "b": 0.5}


def test_compare_ibs_direction(tmp_path):
    rows = [("SURVAE", "a", f, 0.7, 0.10 + 0.001 * f) for f in range(3)]
    rows += [("BASE", "a", f, 0.6, 0.20 + 0.001 * f) for f in range(3)]
    _fold_csv(tmp_path / "ext.csv", rows)
    cli.main(["compare", "--external", str(tmp_path / "ext.csv"), "--out", str(tmp_path)])
    rep = json.loads((tmp_path / "compare.json").read_text())
    assert rep["p_values"]["ibs"]["BASE"]["a"] < 1e-4
    assert rep["mrr"]["ibs"] == {"BASE": 0.5, "SURVAE": 1.0}


def test_compare_dataset_mismatch(tmp_path, capsys):
    _fold_csv(tmp_path / "ext.csv", [("SURVAE", "a", 0, 0.6, 0.2), ("BASE", "b", 0, 0.6, 0.2)])
    code, _, err = _run(["compare", "--external", str(tmp_path / "ext.csv")], capsys)
    assert code == 1
    assert "dataset mismatch" in err and "BASE" in err


def test_compare_with_results_file(synth, tmp_path, capsys):
    _run(["cv", "--data", str(synth / "s.csv"), "--schema", str(synth / "s.schema.yaml"), "--k", "2",
          "--seeds", "1", "--best", "1", "--out", str(tmp_path / "cv"), *FAST], capsys)
    _fold_csv(tmp_path / "ext.csv", [("BASE", "s", 0, 0.6, 0.2), ("BASE", "s", 1, 0.62, 0.21)])
    code, _, _ = _run(["compare", "--external", str(tmp_path / "ext.csv"), "--results",
                       str(tmp_path / "cv" / "results.json"), "--out", str(tmp_path)], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "compare.json").read_text())
    assert rep["models"] == ["BASE", "SURVAE"] and rep["datasets"] == ["s"]


def test_entry_point_installed(tmp_path):
    proc = subprocess.run(["survae", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("cv", "train", "eval", "synth", "compare"):
        assert sub in proc.stdout
