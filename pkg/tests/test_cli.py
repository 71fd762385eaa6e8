import json
import os

import pytest

from app import __version__
from app.config import OUT_ENV
from app.main import build_parser, main
from app.workers import WORKERS_ENV

SMALL_RUN = "\n".join([
    "PROBLEM__P=80",
    "PROBLEM__N=6",
    "PROBLEM__M=6",
    "PROBLEM__T=3",
    "PROBLEM__SIGMA=0.2",
    "GROUND_TRUTH__GAP_SQ=0.5",
    "SWEEP__GRID=0.5",
]) + "\n"


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)
    monkeypatch.delenv(WORKERS_ENV, raising=False)


@pytest.fixture
def run_file(tmp_path):
    path = tmp_path / "small.env"
    path.write_text(SMALL_RUN, encoding="utf-8")
    return str(path)


def _read(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["--version"])
    assert excinfo.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_theory_writes_predictions(tmp_path):
    out = str(tmp_path / "theory")
    assert main(["theory", "--out", out]) == 0
    for name in ("theory.csv", "theory_details.json", "coefficients.json", "run_config.env", "manifest.json"):
        assert os.path.isfile(os.path.join(out, name)), name
    manifest = json.loads(_read(os.path.join(out, "manifest.json")))
    assert manifest["command"] == "theory"
    assert "theory.csv" in manifest["files"]
    assert "concurrent/d0/5" in json.loads(_read(os.path.join(out, "coefficients.json")))


def test_theory_json_format(tmp_path):
    out = str(tmp_path / "theory")
    assert main(["theory", "--out", out, "--format", "json"]) == 0
    records = json.loads(_read(os.path.join(out, "theory.json")))
    assert {r["strategy"] for r in records} == {"concurrent", "sequential"}


def test_invalid_config_exits_with_two(tmp_path, caplog):
    path = tmp_path / "bad.env"
    path.write_text("PROBLEM__P=30\n", encoding="utf-8")
    assert main(["theory", "--config", str(path), "--out", str(tmp_path / "x")]) == 2
    assert "problem.p" in caplog.text


def test_single_trial_is_rejected(run_file, tmp_path):
    assert main(["simulate", "--config", run_file, "--trials", "1", "--out", str(tmp_path / "x")]) == 2


def test_simulate_reruns_are_identical(run_file, tmp_path):
    outputs = []
    for k in range(2):
        out = str(tmp_path / f"run{k}")
        assert main(["simulate", "--config", run_file, "--trials", "8", "--seed", "3", "--out", out]) == 0
        outputs.append(out)
    for name in ("results.csv", "error_table.csv", "ground_truth.csv", "datasets.csv", "manifest.json"):
        assert _read(os.path.join(outputs[0], name)) == _read(os.path.join(outputs[1], name)), name
    details = json.loads(_read(os.path.join(outputs[0], "results.json")))
    assert set(details["traces"]) == {"concurrent", "sequential"}


def test_simulate_artifacts_record_seeds(run_file, tmp_path):
    out = str(tmp_path / "run")
    assert main(["simulate", "--config", run_file, "--trials", "4", "--seed", "5", "--out", out]) == 0
    traces = json.loads(_read(os.path.join(out, "results.json")))["traces"]
    assert {label: trace["config"]["seeds"] for label, trace in traces.items()} == {
        "concurrent": {"master": 5, "trial": 0},
        "sequential": {"master": 5, "trial": 0},
    }
    ground_truth = _read(os.path.join(out, "ground_truth.csv")).splitlines()
    assert ground_truth[0].startswith("seed,x1,")
    assert all(line.startswith("7,") for line in ground_truth[1:])
    datasets = _read(os.path.join(out, "datasets.csv")).splitlines()
    assert datasets[0].startswith("source,seed,trial,y,x1,")
    # n = 6 samples for each of the T = 3 tasks
    assert len(datasets) == 1 + 18
    assert all(line.split(",")[1:3] == ["5", "0"] for line in datasets[1:])
    assert "datasets.csv" in json.loads(_read(os.path.join(out, "manifest.json")))["files"]


def test_run_config_reproduces_the_run(run_file, tmp_path):
    first = str(tmp_path / "first")
    assert main(["simulate", "--config", run_file, "--trials", "4", "--out", first]) == 0
    second = str(tmp_path / "second")
    assert main(["simulate", "--config", os.path.join(first, "run_config.env"), "--out", second]) == 0
    assert _read(os.path.join(first, "results.csv")) == _read(os.path.join(second, "results.csv"))


def test_single_point_sweep(run_file, tmp_path):
    out = str(tmp_path / "sweep")
    assert main(["sweep", "--config", run_file, "--trials", "4", "--out", out]) == 0
    assert "<svg" in _read(os.path.join(out, "sweep.svg"))
    assert _read(os.path.join(out, "sweep.csv")).startswith("axis_value,strategy,metric")
    meta = json.loads(_read(os.path.join(out, "sweep_meta.json")))
    assert meta["grid"] == [0.5]


@pytest.mark.slow
def test_verify_theorems(tmp_path):
    out = str(tmp_path / "verify")
    assert main(["verify", "--suite", "theorems", "--out", out]) == 0
    assert _read(os.path.join(out, "verify_report.txt")).startswith("theorems: PASS")
    manifest = json.loads(_read(os.path.join(out, "manifest.json")))
    assert manifest["passed"] is True
