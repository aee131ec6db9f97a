from pathlib import Path

import numpy as np
import pytest

from metastab.landscape import analyze
from metastab.potential import load_spec, parse_spec

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"

DOUBLE_WELL = """
dimension: 2
potential:
  terms:
    - {{coeff: 1.0, powers: [4, 0]}}
    - {{coeff: -2.0, powers: [2, 0]}}
    - {{coeff: 1.0, powers: [0, 0]}}
    - {{coeff: 1.0, powers: [0, 2]}}
ell:
  kind: skew_poly
  J:
    - [[0.0, {c}], [{mc}, 0.0]]
domain: {{lower: [-2.0, -2.0], upper: [2.0, 2.0]}}
level_H: {H}
epsilons: [0.15, 0.12, 0.1]
r0: 0.55
seed: 7
"""


def double_well_text(c: float = 0.0, H: float = 1.0) -> str:
    return DOUBLE_WELL.format(c=float(c), mc=-float(c), H=H)


def double_well(c: float = 0.0, H: float = 1.0):
    return parse_spec(double_well_text(c, H)).field_eval()


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def dw0():
    ev = load_spec(FIXTURES / "double_well_c0.yaml").field_eval()
    return ev, analyze(ev)


@pytest.fixture(scope="session")
def dw1():
    ev = load_spec(FIXTURES / "double_well_c1.yaml").field_eval()
    return ev, analyze(ev)


@pytest.fixture(scope="session")
def triple():
    ev = load_spec(FIXTURES / "triple_well.yaml").field_eval()
    return ev, analyze(ev)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_CRITERIA: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
