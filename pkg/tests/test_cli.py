import json

import numpy as np
import pytest

from pqadv import pipeline, pqgen
from pqadv.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--per-class", "8", "--seed", "2", "--out", str(d / "data")]) == EXIT_OK
    assert main(["train", "--data", str(d / "data"), "--epochs", "2", "--quiet",
                 "--out", str(d / "m.pqm")]) == EXIT_OK
    return d


def test_gen_writes_dataset(workdir):
    ds = pqgen.load_dataset(workdir / "data")
    assert len(ds.train) + len(ds.test) == 17 * 8
    assert (workdir / "data" / "run_config.json").exists()


def test_attack_csv_columns(workdir, capsys):
    out = workdir / "adv.csv"
    assert main(["attack", "--model", str(workdir / "m.pqm"), "--data", str(workdir / "data"),
                 "--method", "fgsm", "--eps", "0.5", "--n", "10", "--out", str(out)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["method"] == "fgsm" and summary["n"] == 10
    header = out.read_text().splitlines()[0].split(",")
    assert header[:2] == ["label", "s0"]
    assert header[-5:] == ["orig_label", "pred_before", "pred_after", "l2_r", "iters"]
    X, labels, extra = pqgen.read_signals_csv(out)
    np.testing.assert_allclose(extra["l2_r"], 0.5 * np.sqrt(640), rtol=1e-6)
    assert (workdir / "adv.csv.config.json").exists()


def test_eval_outputs(workdir):
    adv = workdir / "adv_ssa.csv"
    assert main(["attack", "--model", str(workdir / "m.pqm"), "--data", str(workdir / "data"),
                 "--method", "ssa", "--n", "12", "--out", str(adv)]) == EXIT_OK
    out = workdir / "eval"
    assert main(["eval", "--model", str(workdir / "m.pqm"), "--adv", str(adv),
                 "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["entropy"]) == {"H_w_out", "H_out", "H_w_in", "H_in"}
    assert len(summary["degrees"]["in"]) == 17
    assert len((out / "confusion.csv").read_text().splitlines()) == 18
    assert "edges" in json.loads((out / "graph.json").read_text())


def test_universal_and_project(workdir):
    v = workdir / "v.json"
    assert main(["universal", "--model", str(workdir / "m.pqm"), "--data", str(workdir / "data"),
                 "--subset", "20", "--max-epochs", "1", "--out", str(v)]) == EXIT_OK
    d = json.loads(v.read_text())
    assert len(d["v"]) == 640 and d["l2_norm"] <= 1.0 + 1e-12
    proj = workdir / "p.csv"
    assert main(["project", "--model", str(workdir / "m.pqm"), "--data", str(workdir / "data"),
                 "--n", "30", "--perplexity", "5", "--iters", "50", "--source", "raw",
                 "--out", str(proj)]) == EXIT_OK
    lines = proj.read_text().splitlines()
    assert lines[0] == "x,y,label" and len(lines) == 31


def test_advtrain_and_transfer(workdir):
    trace = workdir / "trace.csv"
    assert main(["advtrain", "--model", str(workdir / "m.pqm"), "--data", str(workdir / "data"),
                 "--epochs", "1", "--rho-n", "5", "--out", str(workdir / "h.pqm"),
                 "--trace", str(trace)]) == EXIT_OK
    assert len(trace.read_text().splitlines()) == 3
    out = workdir / "t.json"
    assert main(["transfer", "--target", str(workdir / "m.pqm"), "--data", str(workdir / "data"),
                 "--type", "2", "--ratio", "1", "--reps", "1", "--epochs", "1", "--n", "8",
                 "--method", "ssa", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["box_type"] == 2


def test_missing_model_is_config_error(workdir, capsys):
    code = main(["attack", "--model", str(workdir / "nope.pqm"), "--data",
                 str(workdir / "data"), "--out", str(workdir / "x.csv")])
    assert code == EXIT_CONFIG
    assert "--model" in capsys.readouterr().err


def test_runtime_error_exit_code(workdir, capsys):
    # 1/100 of the training split is far too little for a substitute
    code = main(["transfer", "--target", str(workdir / "m.pqm"), "--data", str(workdir / "data"),
                 "--ratio", "100", "--reps", "1", "--out", str(workdir / "t2.json")])
    assert code == EXIT_RUNTIME
    assert "InsufficientData" in capsys.readouterr().err


def test_config_file_overrides_flags(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"per_class": 5, "seed": 9}))
    assert main(["--config", str(cfg), "gen", "--out", str(tmp_path / "d")]) == EXIT_OK
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["per_class"] == 5 and manifest["seed"] == 9
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["--config", str(cfg), "gen", "--out", str(tmp_path / "e")]) == EXIT_CONFIG
    cfg.write_text("not json")
    assert main(["--config", str(cfg), "gen", "--out", str(tmp_path / "e")]) == EXIT_CONFIG


def test_thread_settings(tmp_path, monkeypatch):
    assert main(["--threads", "1", "gen", "--per-class", "4", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("PQADV_THREADS", "many")
    assert main(["gen", "--per-class", "4", "--out", str(tmp_path / "b")]) == EXIT_CONFIG


def test_bad_flags_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["attack", "--method", "pgd"])
    assert exc.value.code == 2


def test_reproduce_and_table(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["reproduce", "--scale", "smoke", "--quiet", "--out", str(out)]) == EXIT_OK
    report = pipeline.load_report(out / "report.json")
    assert report["provenance"]["config_hash"] == pipeline.scale_config("smoke").digest()
    capsys.readouterr()
    assert main(["table", "--report", str(out / "report.json"), "--table", "entropy"]) == EXIT_OK
    rows = capsys.readouterr().out.splitlines()
    assert len(rows) == 3 and len(rows[0].split(",")) == 7


def test_reproduce_rejects_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_a_field": 3}))
    code = main(["--config", str(cfg), "reproduce", "--scale", "smoke", "--out",
                 str(tmp_path / "r")])
    assert code == EXIT_CONFIG
