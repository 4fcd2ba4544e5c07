import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from trmst.cli import main
from trmst.core import Dataset, write_csv


@pytest.fixture(scope="module")
def stanford_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    assert main(["prep-stanford", "--out", str(out)]) == 0
    return out / "stanford.csv"


def run(*argv):
    return main([str(a) for a in argv])


def test_prep_writes_manifest(stanford_csv):
    m = json.loads((stanford_csv.parent / "manifest.json").read_text())
    assert m["command"] == "prep-stanford"
    assert "stanford.csv" in m["outputs"]
    assert stanford_csv.read_text().splitlines()[0].startswith("id,start,stop,status")


def test_fit_is_byte_reproducible(stanford_csv, tmp_path, capsys):
    for sub in ("a", "b"):
        assert run("fit", "--data", stanford_csv, "--schema-td", "transplant",
                   "--model", "t-rmst", "--tau", 4.93, "--out", tmp_path / sub) == 0
    for name in ("coefficients.csv", "diagnostics.csv", "model.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    out = capsys.readouterr().out
    assert "transplant" in out and "RMSTd" in out
    header = (tmp_path / "a" / "coefficients.csv").read_text().splitlines()[0]
    assert header == "covariate,estimate,se,ci_low,ci_high,p,effect,effect_low,effect_high"


def test_fit_cox_reports_hazard_ratios(stanford_csv, tmp_path):
    assert run("fit", "--data", stanford_csv, "--schema-td", "transplant",
               "--model", "t-cox", "--out", tmp_path) == 0
    rows = [r.split(",") for r in (tmp_path / "coefficients.csv").read_text().splitlines()]
    enroll = next(r for r in rows if r[0] == "enrollment")
    assert float(enroll[6]) == pytest.approx(np.exp(float(enroll[1])))


def test_time_dependent_model_without_td_columns_is_fixed_model(tmp_path):
    rng = np.random.default_rng(2)
    n = 60
    x = rng.normal(size=(n, 2))
    t = rng.exponential(size=n) + 0.01
    c = rng.exponential(2.0, size=n)
    d = Dataset(np.arange(1, n + 1), np.zeros(n), np.minimum(t, c), (t <= c).astype(int), x,
                fixed_names=("a", "b"))
    path = tmp_path / "d.csv"
    write_csv(d, path)
    for kind in ("t-rmst", "f-rmst"):
        assert run("fit", "--data", path, "--model", kind, "--tau", 1.5,
                   "--out", tmp_path / kind) == 0
    for name in ("coefficients.csv", "diagnostics.csv"):
        assert ((tmp_path / "t-rmst" / name).read_bytes()
                == (tmp_path / "f-rmst" / name).read_bytes())


def test_predict(stanford_csv, tmp_path, capsys):
    run("fit", "--data", stanford_csv, "--schema-td", "transplant", "--model", "t-rmst",
        "--tau", 4.93, "--out", tmp_path)
    capsys.readouterr()
    model = tmp_path / "model.json"
    args = ["predict", "--model-file", model, "--set", "age_45_60=0", "--set", "age_60plus=0",
            "--set", "enrollment=1", "--set", "surgery=1"]
    assert run(*args, "--set", "transplant=1") == 0
    mu, lo, hi = map(float, capsys.readouterr().out.replace("[", "").replace("]", "")
                     .replace(",", "").split())
    assert lo <= mu <= hi
    assert mu == pytest.approx(1.948, abs=0.01)


def test_predict_missing_covariate_is_usage_error(stanford_csv, tmp_path, capsys):
    run("fit", "--data", stanford_csv, "--schema-td", "transplant", "--model", "t-rmst",
        "--tau", 4.93, "--out", tmp_path)
    with pytest.raises(SystemExit) as exc:
        run("predict", "--model-file", tmp_path / "model.json", "--set", "surgery=1")
    assert exc.value.code == 2
    assert "--set transplant=VALUE" in capsys.readouterr().err


def test_predict_rejects_cox_model(stanford_csv, tmp_path, capsys):
    run("fit", "--data", stanford_csv, "--schema-td", "transplant", "--model", "t-cox",
        "--out", tmp_path)
    assert run("predict", "--model-file", tmp_path / "model.json", "--set", "x=1") == 1
    assert "t-cox" in capsys.readouterr().err


def test_malformed_row_names_line(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("id,start,stop,status,x\n1,0,1,1,0\n2,0,oops,1,1\n")
    assert run("fit", "--data", p, "--model", "f-rmst", "--tau", 1, "--out", tmp_path) == 1
    assert "line 3" in capsys.readouterr().err


def test_exit_code_tracks_outputs(stanford_csv, tmp_path):
    ok = tmp_path / "ok"
    assert run("fit", "--data", stanford_csv, "--schema-td", "transplant", "--model", "f-rmst",
               "--tau", 4.93, "--out", ok) == 0
    assert {p.name for p in ok.iterdir()} == {"coefficients.csv", "diagnostics.csv",
                                             "model.json", "manifest.json"}
    bad = tmp_path / "bad"
    # an RMST model without a horizon fails after the output directory exists
    assert run("fit", "--data", stanford_csv, "--schema-td", "transplant", "--model", "t-rmst",
               "--out", bad) == 1
    assert not any(p.suffix in (".csv", ".json") for p in bad.iterdir())


def test_simulate(tmp_path, capsys):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("n = 150\nbig_n = 20000\n")
    for sub in ("a", "b"):
        assert run("simulate", "--config", cfg, "--replicates", 8, "--seed", 3,
                   "--workers", 1, "--out", tmp_path / sub) == 0
    assert (tmp_path / "a" / "coefficient_study.csv").read_bytes() == (tmp_path / "b" / "coefficient_study.csv").read_bytes()
    lines = (tmp_path / "a" / "coefficient_study.csv").read_text().splitlines()
    assert lines[0] == "n,censoring,coefficient,true,bias,mse,rmse,rel_se,cp"
    assert len(lines) == 4
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["seed"] == 3 and m["config"]["resolved"]["n"] == 150
    assert run("simulate", "--config", cfg, "--study", "prediction", "--replicates", 4,
               "--workers", 1, "--out", tmp_path / "p") == 0
    assert "T-RMST" in (tmp_path / "p" / "prediction_study.csv").read_text()


def test_simulate_bad_config(tmp_path, capsys):
    assert run("simulate", "--replicates", 0, "--out", tmp_path) == 1
    assert "replicates" in capsys.readouterr().err


def test_evaluate(stanford_csv, tmp_path):
    for sub in ("a", "b"):
        assert run("evaluate", "--data", stanford_csv, "--schema-td", "transplant",
                   "--tau", 4.93, "--repeats", 3, "--fraction", "2/3", "--seed", 1,
                   "--out", tmp_path / sub) == 0
    a = (tmp_path / "a" / "evaluation.csv").read_text()
    assert a == (tmp_path / "b" / "evaluation.csv").read_text()
    lines = a.splitlines()
    assert lines[0] == "model,c_index,prediction_error,n_test,n_usable_pairs,repeats,skipped_repeats"
    assert lines[1].startswith("T-Cox,") and lines[1].split(",")[2] == ""


def test_evaluate_unknown_model(stanford_csv, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("evaluate", "--data", stanford_csv, "--tau", 4.93, "--models", "t-cox,forest",
            "--out", tmp_path)
    assert exc.value.code == 2


@pytest.mark.skipif(shutil.which("trmst") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["trmst", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("trmst ")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "trmst.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "simulate" in res.stdout
