import csv
import json
from importlib import resources

import pytest
from jsonschema import validate

from metastab.cli import main

from conftest import FIXTURES

DW1 = str(FIXTURES / "double_well_c1.yaml")
FAST = ["--eps", "0.4,0.3", "--traj", "4", "--order-traj", "1", "--horizon", "2", "--dt", "0.002"]

D4 = """
dimension: 4
potential:
  terms:
    - {coeff: 1.0, powers: [4, 0, 0, 0]}
    - {coeff: -2.0, powers: [2, 0, 0, 0]}
    - {coeff: 1.0, powers: [0, 0, 0, 0]}
    - {coeff: 1.0, powers: [0, 2, 0, 0]}
    - {coeff: 1.0, powers: [0, 0, 2, 0]}
    - {coeff: 1.0, powers: [0, 0, 0, 2]}
domain: {lower: [-2, -2, -2, -2], upper: [2, 2, 2, 2]}
level_H: 1.0
epsilons: [0.2]
r0: 0.3
"""


def _schema(name):
    return json.loads(resources.files("metastab").joinpath(f"schemas/{name}.schema.json").read_text())


def _load(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["all", "--spec", DW1, "--out", str(out), *FAST])
    return rc, out


def test_all_stages_and_schemas(full_run):
    rc, out = full_run
    assert rc == 0
    for name in ("landscape", "chains", "summary", "testfn_report", "verify", "manifest"):
        validate(_load(out / f"{name}.json"), _schema(name))
    man = _load(out / "manifest.json")
    assert "timings.json" not in man["files"]
    assert {"transitions.csv", "orderpath.csv", "landscape.json"} <= set(man["files"])


def test_csv_columns(full_run):
    _, out = full_run
    with open(out / "transitions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["eps", "trajectory", "from_valley", "to_valley", "tau_natural", "tau_rescaled", "status"]
    assert len(rows) == 8
    with open(out / "orderpath.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["eps", "trajectory", "state", "holding_rescaled", "censored"]


def test_rerun_is_byte_identical(full_run, tmp_path):
    _, out = full_run
    other = tmp_path / "again"
    assert main(["all", "--spec", DW1, "--out", str(out), *FAST]) == 0
    assert main(["all", "--spec", DW1, "--out", str(other), *FAST]) == 0
    for f in out.iterdir():
        if f.name in ("timings.json", "manifest.json"):
            continue
        assert f.read_bytes() == (other / f.name).read_bytes(), f.name
    a, b = _load(out / "manifest.json"), _load(other / "manifest.json")
    a.pop("output_dir"), b.pop("output_dir")
    assert a == b


def test_parse_error_writes_nothing(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dimension: 2\npotential: {terms: [{coeff: 1.0, powers: [2]}]}\n")
    out = tmp_path / "out"
    assert main(["analyze", "--spec", str(bad), "--out", str(out)]) == 2
    assert not out.exists()


def test_bad_seed_is_parse_error(tmp_path):
    assert main(["analyze", "--spec", DW1, "--out", str(tmp_path), "--seed", "-1"]) == 2


def test_single_well_chains_model_error(tmp_path):
    spec = str(FIXTURES / "single_well.yaml")
    assert main(["analyze", "--spec", spec, "--out", str(tmp_path)]) == 0
    assert main(["chains", "--spec", spec, "--out", str(tmp_path)]) == 3
    assert not (tmp_path / "chains.json").exists()


def test_missing_and_stale_artifacts(tmp_path):
    assert main(["chains", "--spec", DW1, "--out", str(tmp_path)]) == 4
    assert main(["analyze", "--spec", DW1, "--out", str(tmp_path)]) == 0
    other = str(FIXTURES / "double_well_c2.yaml")
    assert main(["chains", "--spec", other, "--out", str(tmp_path)]) == 4


def test_verify_failure_exit_code(tmp_path, capsys):
    # the residual monotonicity check does not hold at J = 4 for these eps
    assert main(["verify", "--spec", DW1, "--out", str(tmp_path), "--quadrature"]) == 5
    err = capsys.readouterr().err
    assert "FAIL  saddle residual strictly decreasing in eps" in err
    rep = _load(tmp_path / "verify.json")
    assert rep["failed"] == ["saddle residual strictly decreasing in eps"]


def test_verify_passes_without_quadrature(tmp_path, capsys):
    assert main(["verify", "--spec", DW1, "--out", str(tmp_path)]) == 0
    assert "FAIL" not in capsys.readouterr().err


def test_quadrature_skipped_in_four_dimensions(tmp_path):
    spec = tmp_path / "d4.yaml"
    spec.write_text(D4)
    assert main(["verify", "--spec", str(spec), "--out", str(tmp_path), "--quadrature"]) == 0
    rep = _load(tmp_path / "verify.json")
    assert "quadrature checks skipped: dimension above 3" in rep["notices"]
    assert "residuals" not in _load(tmp_path / "testfn_report.json")
