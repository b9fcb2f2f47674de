import csv
import json
import subprocess
import sys

import pytest

from fairload.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(d / "raw"), "--n-male", "3", "--n-female", "3",
                 "--channels", "12", "--cycles", "3", "--seed", "5", "--quiet"]) == 0
    return d


@pytest.fixture(scope="module")
def model(workdir):
    out = workdir / "model"
    code = main(["train", "--dataset", str(workdir / "raw"), "--out", str(out),
                 "--epochs", "1", "--batch-size", "32", "--arch-scale", "0.05", "--quiet"])
    assert code == 0
    return out


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_prints_usage(capsys):
    assert main(["fly"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_rejected(capsys):
    assert main(["selftest", "--colour"]) == 1
    assert capsys.readouterr().out == ""


def test_gen_writes_dataset_and_ground_truth(workdir):
    names = {p.name for p in (workdir / "raw").iterdir()}
    assert {"ground_truth.json", "generator.json", "cycles.f32"} <= names
    gen = json.loads((workdir / "raw" / "generator.json").read_text())
    assert gen["seed"] == 5 and gen["n_channels"] == 12


def test_gen_without_out_is_usage_error():
    assert main(["gen", "--quiet"]) == 1


def test_invalid_generator_config_is_data_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "x"), "--channels", "10", "--quiet"]) == 2


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("FAIRLOAD_SEED", "17")
    assert main(["gen", "--out", str(tmp_path / "g"), "--n-male", "1", "--n-female", "1",
                 "--channels", "12", "--cycles", "1", "--quiet"]) == 0
    assert json.loads((tmp_path / "g" / "generator.json").read_text())["seed"] == 17


def test_flags_override_config_values(tmp_path):
    (tmp_path / "g.json").write_text(json.dumps({"n_male": 1, "n_female": 1, "n_channels": 18,
                                                "cycles_per_trial": 1, "seed": 2}))
    assert main(["gen", "--config", str(tmp_path / "g.json"), "--channels", "12",
                 "--out", str(tmp_path / "g"), "--quiet"]) == 0
    gen = json.loads((tmp_path / "g" / "generator.json").read_text())
    assert gen["n_channels"] == 12 and gen["seed"] == 2


def test_preprocess_and_stats_reuse(workdir, tmp_path):
    assert main(["preprocess", "--dataset", str(workdir / "raw"),
                 "--out", str(tmp_path / "z"), "--quiet"]) == 0
    assert main(["preprocess", "--dataset", str(workdir / "raw"), "--stats-from",
                 str(tmp_path / "z"), "--out", str(tmp_path / "z2"), "--quiet"]) == 0
    assert main(["preprocess", "--dataset", str(workdir / "raw"), "--stats-from",
                 str(workdir / "raw"), "--out", str(tmp_path / "z3"), "--quiet"]) == 2


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "none"), "--out", str(tmp_path / "m"),
                 "--quiet"]) == 2


def test_train_writes_model_and_log(model):
    assert (model / "model.json").exists() and (model / "params.f32").exists()
    assert len((model / "train_log.csv").read_text().splitlines()) == 2
    assert json.loads((model / "model.json").read_text())["arch"]["arch_scale"] == 0.05


def test_predict_eval_and_export(workdir, model, capsys):
    assert main(["predict", "--model", str(model), "--dataset", str(workdir / "raw"),
                 "--quiet"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "subject_id,trial_id,sex,weight_kg,predicted_kg"
    assert len(lines) == 1 + 6 * 3
    assert main(["eval", "--model", str(model), "--dataset", str(workdir / "raw"),
                 "--quiet"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_f"] == 9 and report["mae_overall"] >= 0
    out = workdir / "latents.csv"
    assert main(["export-latents", "--model", str(model), "--dataset", str(workdir / "raw"),
                 "--out", str(out), "--quiet"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert "zsex_mean_0" in rows[0] and len(rows) > 18


def test_quiet_suppresses_informational_output(workdir, tmp_path, capsys):
    main(["train", "--dataset", str(workdir / "raw"), "--out", str(tmp_path / "m"),
          "--epochs", "1", "--batch-size", "32", "--arch-scale", "0.05",
          "--mode", "plain_vae"])
    loud = capsys.readouterr()
    assert "final epoch" in loud.err
    main(["train", "--dataset", str(workdir / "raw"), "--out", str(tmp_path / "m"),
          "--epochs", "1", "--batch-size", "32", "--arch-scale", "0.05",
          "--mode", "plain_vae", "--quiet"])
    quiet = capsys.readouterr()
    assert quiet.err == "" and quiet.out == ""


def test_sweep_and_summarize(workdir, tmp_path):
    cfg = {"dataset": str(workdir / "raw"), "models": ["knn"], "ratios": [[0.5, 0.5]],
           "seeds": [0], "output_dir": str(tmp_path / "ignored")}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    run = tmp_path / "run"
    assert main(["sweep", "--config", str(tmp_path / "c.json"), "--out", str(run),
                 "--quiet"]) == 0
    assert (run / "results.csv").exists() and not (tmp_path / "ignored").exists()
    assert main(["summarize", "--results", str(run / "results.csv"),
                 "--out", str(tmp_path / "s"), "--quiet"]) == 0
    assert (tmp_path / "s" / "summary.csv").exists()
    assert (tmp_path / "s" / "plots" / "sp.svg").exists()
    knn = run / "models" / "knn_0.5-0.5_s0" / "M00"
    assert main(["eval", "--model", str(knn), "--dataset", str(workdir / "raw"),
                 "--out", str(tmp_path / "e.json"), "--quiet"]) == 0


def test_sweep_requires_config():
    assert main(["sweep", "--quiet"]) == 1


def test_sweep_rejects_invalid_config(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"models": ["svm"]}))
    assert main(["sweep", "--config", str(tmp_path / "c.json"), "--quiet"]) == 2


def test_summarize_of_malformed_csv_is_data_error(tmp_path, capsys):
    (tmp_path / "r.csv").write_text("nope\n")
    assert main(["summarize", "--results", str(tmp_path / "r.csv"), "--quiet"]) == 2
    assert ":1:" in capsys.readouterr().err


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "FAIL" not in out


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "fairload", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "selftest" in res.stdout
