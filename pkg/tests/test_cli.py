import json

import pytest

from coarse_snmm.cli import main


@pytest.fixture(scope="module")
def cohort_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "cohort.csv"
    assert main(["simulate", "--n", "800", "--seed", "2", "--out", str(path), "--truth-out", str(d / "t.json")]) == 0
    return path


def test_simulate_small(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["simulate", "--n", "10", "--seed", "1", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "id,month,a,y,injdrug"
    assert len(lines) == 1 + 10 * 25


def test_truth_sidecar(cohort_csv):
    truth = json.loads((cohort_csv.parent / "t.json").read_text())
    assert truth["truth"]["psi"] == [25.0, -0.7]


def test_estimate_writes_json(cohort_csv, tmp_path):
    out = tmp_path / "e.json"
    assert main(["estimate", "--data", str(cohort_csv), "--estimator", "4", "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["estimator"] == "4"
    assert len(res["psi_hat"]) == 2 and len(res["sandwich_se"]) == 2
    assert res["spec"]["n"] == 800 and res["spec"]["K"] == 18
    assert res["diagnostics"]["residual"] < 1e-6


def test_estimate_tiny_cohort_json_or_estimation_error(tmp_path, capsys):
    data = tmp_path / "t.csv"
    main(["simulate", "--n", "10", "--seed", "1", "--out", str(data)])
    rc = main(["estimate", "--data", str(data), "--estimator", "2", "--out", str(tmp_path / "o.json")])
    assert rc in (0, 3)
    if rc == 3:
        assert "estimation failed" in capsys.readouterr().err
    else:
        assert "psi_hat" in json.loads((tmp_path / "o.json").read_text())


def test_bootstrap_adds_interval_block(cohort_csv, tmp_path):
    out = tmp_path / "b.json"
    assert main(["estimate", "--data", str(cohort_csv), "--estimator", "2", "--out", str(out)]) == 0
    first = json.loads(out.read_text())
    assert main(["bootstrap", "--data", str(cohort_csv), "--estimator", "2", "--B", "6", "--seed", "4",
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["psi_hat"] == first["psi_hat"]
    block = res["bootstrap"]
    assert block["B"] == 6 and block["seed"] == 4
    assert all(lo <= hi for lo, hi in zip(block["lower"], block["upper"]))


def test_config_errors_exit_2(cohort_csv, tmp_path, capsys):
    assert main(["estimate", "--data", str(cohort_csv), "--estimator", "7"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"h_featurez": ["1"]}))
    assert main(["estimate", "--data", str(cohort_csv), "--config", str(bad)]) == 2
    assert main(["bootstrap", "--data", str(cohort_csv), "--B", "0"]) == 2
    assert main(["mc-study", "--replicates", "0"]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_data_file_is_config_error(tmp_path):
    assert main(["estimate", "--data", str(tmp_path / "nope.csv")]) == 2


def test_mc_study_outputs(tmp_path):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"estimators": ["2", "4"]}))
    out = tmp_path / "mc.csv"
    assert main(["mc-study", "--config", str(cfg), "--replicates", "2", "--n", "500", "--seed", "5",
                 "--out", str(out)]) == 0
    assert out.read_text().startswith("estimator,parameter")
    assert (tmp_path / "mc_effects.csv").exists()
    summary = json.loads((tmp_path / "mc.json").read_text())
    assert set(summary["estimators"]) == {"2", "4"}
