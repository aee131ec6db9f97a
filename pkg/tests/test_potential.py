import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metastab.errors import SpecParseError
from metastab.potential import (
    check_structure,
    derivative_selfcheck,
    halton,
    load_spec,
    parse_spec,
    serialize_spec,
    spec_hash,
)

from conftest import double_well, double_well_text


def test_parse_double_well_fields():
    spec = parse_spec(double_well_text(c=1.0))
    assert spec.dimension == 2
    assert len(spec.terms) == 4
    assert spec.ell_kind == "skew_poly"
    assert spec.J_coeffs == (((0.0, 1.0), (-1.0, 0.0)),)
    assert spec.epsilons == (0.15, 0.12, 0.1)
    assert spec.seed == 7


def test_values_double_well():
    ev = double_well(c=1.0)
    x = np.array([0.5, 0.5])
    # U = (x^2-1)^2 + y^2, hand evaluated
    assert ev.U(x) == pytest.approx(0.5625 + 0.25, abs=1e-15)
    np.testing.assert_allclose(ev.grad(x), [4 * 0.125 - 2.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(ev.hess(x), [[12 * 0.25 - 4, 0], [0, 2]], atol=1e-15)
    # ell = J0 grad U
    np.testing.assert_allclose(ev.ell(x), [1.0, 1.5], atol=1e-15)


def test_zero_ell_kind():
    ev = double_well(c=0.0)
    x = np.array([[0.3, -0.2], [1.0, 1.0]])
    assert np.all(ev.ell(x) == 0)


def test_skew_violation_names_entry():
    text = double_well_text(c=1.0).replace("[[0.0, 1.0], [-1.0, 0.0]]", "[[0.0, 1.0], [1.0, 0.0]]")
    with pytest.raises(SpecParseError, match=r"not skew-symmetric at \(2,1\)"):
        parse_spec(text)


def test_nonzero_diagonal_is_rejected():
    text = double_well_text(c=1.0).replace("[[0.0, 1.0], [-1.0, 0.0]]", "[[0.5, 1.0], [-1.0, 0.0]]")
    with pytest.raises(SpecParseError, match=r"\(1,1\)"):
        parse_spec(text)


def test_exponent_length_error_has_line():
    text = double_well_text().replace("powers: [0, 2]", "powers: [0, 2, 1]")
    with pytest.raises(SpecParseError) as info:
        parse_spec(text)
    assert info.value.line is not None
    assert "length 3" in str(info.value)


@pytest.mark.parametrize(
    "edit, needle",
    [
        (("seed: 7", "seed: -1"), "seed"),
        (("r0: 0.55", "r0: -0.1"), "r0"),
        (("level_H: 1.0", "level_H: abc"), "level_H"),
        (("seed: 7", "seed: 7\nbogus: 1"), "unknown key"),
        (("domain: {lower: [-2.0, -2.0], upper: [2.0, 2.0]}", "domain: {lower: [2.0, -2.0], upper: [-2.0, 2.0]}"), "domain"),
    ],
)
def test_parse_errors(edit, needle):
    text = double_well_text().replace(*edit)
    with pytest.raises(SpecParseError, match=needle):
        parse_spec(text)


def test_malformed_yaml():
    with pytest.raises(SpecParseError):
        parse_spec("dimension: [1, 2\n")


def test_load_and_hash(fixtures_dir):
    a = load_spec(fixtures_dir / "double_well_c1.yaml")
    b = parse_spec(serialize_spec(a))
    assert a == b
    assert spec_hash(a) == spec_hash(b)
    assert spec_hash(a) != spec_hash(load_spec(fixtures_dir / "double_well_c0.yaml"))


@settings(max_examples=40, deadline=None)
@given(
    coeffs=st.lists(st.floats(-5, 5, allow_nan=False, allow_subnormal=False), min_size=1, max_size=4),
    c=st.floats(-3, 3, allow_nan=False, allow_subnormal=False),
)
def test_serialize_round_trip(coeffs, c):
    terms = "\n".join(f"    - {{coeff: {v!r}, powers: [{k}, {k % 3}]}}" for k, v in enumerate(coeffs))
    text = (
        "dimension: 2\npotential:\n  terms:\n" + terms + "\n"
        f"ell:\n  kind: skew_poly\n  J:\n    - [[0.0, {c!r}], [{-c!r}, 0.0]]\n"
        "domain: {lower: [-1, -1], upper: [1, 1]}\nlevel_H: 0.5\nr0: 0.1\n"
    )
    spec = parse_spec(text)
    assert parse_spec(serialize_spec(spec)) == spec


@pytest.mark.parametrize("c", [0.0, 1.0, 2.0])
def test_derivatives_match_finite_differences(c):
    ev = double_well(c)
    for x in halton(20, 2, [-1.5, -1.5], [1.5, 1.5]):
        rep = derivative_selfcheck(ev, x)
        assert rep["passed"], rep
        assert rep["errors"]["hess_from_U"] < 1e-4


def test_selfcheck_rejects_bad_step():
    with pytest.raises(ValueError):
        derivative_selfcheck(double_well(1.0), [0.0, 0.0], h=0.0)


def test_structure_on_triple_well(fixtures_dir):
    ev = load_spec(fixtures_dir / "triple_well.yaml").field_eval()
    rep = check_structure(ev)
    assert rep["passed"]
    # J depends on U, so D ell has the rank-one correction; compare against finite differences
    rep = derivative_selfcheck(ev, np.array([0.7, -0.3]))
    assert rep["errors"]["jac_ell"] < 1e-6


def test_structure_detects_violation():
    ev = double_well(1.0)
    bad = type(ev)(ev.coeffs, ev.powers, np.array([[[1.0, 1.0], [-1.0, 0.0]]]), ev.spec)
    assert not check_structure(bad)["passed"]


def test_halton_in_box():
    pts = halton(100, 3, [0, -1, 2], [1, 1, 3])
    assert pts.shape == (100, 3)
    assert np.all(pts >= [0, -1, 2]) and np.all(pts <= [1, 1, 3])
    assert len(np.unique(pts[:, 0])) == 100
