"""Acceptance criteria 1-8, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""

import math
import shutil
import time

import numpy as np
import pytest

from metastab.chain import (
    beta_matrix,
    chain_from_omega,
    dirichlet_form,
    dirichlet_form_y,
    harmonic_extension,
    limiting_chain,
    trace_oracle,
)
from metastab.cli import main
from metastab.landscape import analyze, laplace_check
from metastab.potential import check_structure, derivative_selfcheck, halton, load_spec
from metastab.sim import SimConfig, empirical_generator, run_order_process, run_transition_ensemble
from metastab.testfn import SaddleBox, boundary_check, residual_quadrature, skew_identity_check, synthetic_saddle

from conftest import FIXTURES, record_criterion

pytestmark = pytest.mark.acceptance

DT = 0.0025


def _spec(name):
    return load_spec(FIXTURES / name).field_eval()


def test_criterion_1_landscape_exactness():
    t0 = time.perf_counter()
    errs = {"points": 0.0, "nu": 0.0, "mu": 0.0, "omega": 0.0}
    for c in (0, 1, 2):
        g = analyze(_spec(f"double_well_c{c}.yaml"))
        pts = sorted([m.x for m in g.minima] + [gt.sigma.x for gt in g.gates], key=lambda x: x[0])
        errs["points"] = max(errs["points"], float(np.max(np.abs(np.array(pts) - [[-1, 0], [0, 0], [1, 0]]))))
        errs["nu"] = max(errs["nu"], float(np.max(np.abs(g.nu - 0.25))))
        mu = 1 + math.sqrt(9 + 8 * c * c)
        s = g.gates[0].sigma
        errs["mu"] = max(errs["mu"], abs(s.mu - mu))
        # omega = mu / (2 pi sqrt(|det H|)), det H = -8 at the saddle
        errs["omega"] = max(errs["omega"], abs(g.gates[0].omega - mu / (2 * math.pi * math.sqrt(8))))
    dt = time.perf_counter() - t0
    ok = errs["points"] < 1e-8 and errs["nu"] < 1e-10 and errs["mu"] < 1e-10 and errs["omega"] < 1e-10 and dt < 1
    record_criterion(1, ok, f"max errors {errs}, {dt:.2f} s")
    assert ok


def _random_chain(rng, k):
    c = np.triu(rng.uniform(0.05, 3.0, (k, k)) * (rng.random((k, k)) < 0.5), 1)
    for i in range(k - 1):
        c[i, i + 1] = max(c[i, i + 1], 0.01)
    perm = rng.permutation(k)
    c = (c + c.T)[np.ix_(perm, perm)]
    return chain_from_omega(c)


def test_criterion_2_chain_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_beta, worst_identity, sym = 0.0, 0.0, True
    for _ in range(100):
        k = int(rng.integers(4, 13))
        x = _random_chain(rng, k)
        S = sorted(rng.choice(k, size=int(rng.integers(2, 5)), replace=False).tolist())
        b = beta_matrix(x, S)
        sym &= bool(np.array_equal(b.values, b.values.T))
        worst_beta = max(worst_beta, float(np.max(np.abs(trace_oracle(x, S) - b.values))))
        nu = rng.uniform(0.1, 1.0, len(S))
        y = limiting_chain(b, nu)
        for _ in range(10):
            u, v = rng.standard_normal(len(S)), rng.standard_normal(len(S))
            lhs = dirichlet_form(x, harmonic_extension(x, S, u), harmonic_extension(x, S, v))
            rhs = nu.sum() * dirichlet_form_y(y, u, v)
            worst_identity = max(worst_identity, abs(lhs - rhs))
    dt = time.perf_counter() - t0
    ok = worst_beta < 1e-10 and worst_identity < 1e-10 and sym and dt < 5
    record_criterion(2, ok, f"beta vs trace {worst_beta:.2e}, identity {worst_identity:.2e}, symmetric {sym}, {dt:.2f} s")
    assert ok


def test_criterion_3_structure():
    t0 = time.perf_counter()
    worst_struct, worst_fd = 0.0, 0.0
    for name in ("double_well_c1.yaml", "double_well_c2.yaml", "triple_well.yaml"):
        ev = _spec(name)
        lo, hi = np.asarray(ev.spec.lower), np.asarray(ev.spec.upper)
        pts = np.random.default_rng(3).uniform(lo, hi, (10_000, ev.dim))
        st = check_structure(ev, sample_points=pts)
        worst_struct = max(worst_struct, st["max_orthogonality"], st["max_divergence"])
        for x in halton(20, ev.dim, lo, hi):
            worst_fd = max(worst_fd, derivative_selfcheck(ev, x)["max_error"])
    dt = time.perf_counter() - t0
    ok = worst_struct < 1e-10 and worst_fd < 1e-6 and dt < 2
    record_criterion(3, ok, f"structure {worst_struct:.2e}, finite differences {worst_fd:.2e}, {dt:.2f} s")
    assert ok


def test_criterion_4_laplace():
    t0 = time.perf_counter()
    ev = _spec("double_well_c0.yaml")
    g = analyze(ev)
    reps = {e: laplace_check(ev, g, e) for e in (0.04, 0.02, 0.01)}

    def dev(r):
        return max([abs(r["Z_ratio"] - 1)] + [abs(v["ratio"] - 1) for v in r["valleys"]])

    r = reps[0.02]
    ok_02 = 0.95 <= r["Z_ratio"] <= 1.05 and all(0.9 <= v["ratio"] <= 1.1 for v in r["valleys"])
    closer = dev(reps[0.01]) < dev(reps[0.04])
    dt = time.perf_counter() - t0
    ok = ok_02 and closer and dt < 30
    detail = ", ".join(f"eps={e}: Z ratio {r['Z_ratio']:.4f} valley {r['valleys'][0]['ratio']:.4f}" for e, r in reps.items())
    record_criterion(4, ok, f"{detail}, {dt:.1f} s")
    assert ok


def _monotone_with_one_exception(devs, cis):
    """Deviations decrease along the eps sequence, except at most one adjacent
    pair whose confidence intervals overlap."""
    exceptions = 0
    for a in range(len(devs) - 1):
        if devs[a + 1] < devs[a]:
            continue
        (lo_a, hi_a), (lo_b, hi_b) = cis[a], cis[a + 1]
        if max(lo_a, lo_b) <= min(hi_a, hi_b):
            exceptions += 1
        else:
            return False
    return exceptions <= 1


def test_criterion_5_eyring_kramers():
    t0 = time.perf_counter()
    ev0, ev1 = _spec("double_well_c0.yaml"), _spec("double_well_c1.yaml")
    g0, g1 = analyze(ev0), analyze(ev1)
    runs = {}
    for e in (0.15, 0.12, 0.10):
        runs[e] = run_transition_ensemble(ev0, g0, SimConfig(eps=e, dt=DT, n_trajectories=200, seed=7))
    pred = runs[0.12]["predicted_rescaled"]
    within = abs(runs[0.12]["ratio"] - 1) <= 0.3
    devs = [abs(runs[e]["ratio"] - 1) for e in (0.15, 0.12, 0.10)]
    cis = [tuple(c / runs[e]["predicted_rescaled"] for c in runs[e]["ci95_rescaled"]) for e in (0.15, 0.12, 0.10)]
    mono = _monotone_with_one_exception(devs, cis)
    r1 = run_transition_ensemble(ev1, g1, SimConfig(eps=0.12, dt=DT, n_trajectories=200, seed=7))
    speed = r1["mean_rescaled"] / runs[0.12]["mean_rescaled"]
    target = 4 / (1 + math.sqrt(17))
    speed_ok = abs(speed / target - 1) <= 0.3
    censored = max(r["censored_fraction"] for r in [*runs.values(), r1])
    dt = time.perf_counter() - t0
    ok = within and mono and speed_ok and censored == 0
    record_criterion(
        5,
        ok,
        f"nu1/omega1 = {pred:.4f}; ratios "
        + ", ".join(f"{e}: {runs[e]['ratio']:.3f}" for e in runs)
        + f"; speed-up {speed:.3f} vs {target:.3f}; censored {censored}; {dt:.0f} s",
    )
    assert ok


def test_criterion_6_order_process():
    t0 = time.perf_counter()
    ev = _spec("double_well_c0.yaml")
    g = analyze(ev)
    r_y = 4 * g.gates[0].omega
    logs = run_order_process(ev, g, SimConfig(eps=0.10, dt=DT, horizon=25.0, n_trajectories=8, seed=7))
    rep = empirical_generator(logs, g.S_star)
    rate = rep["rates"][0][1]
    cv = rep["holding_cv_pooled"]
    fracs = {0.10: rep["delta_fraction"]}
    for e in (0.15, 0.12):
        short = run_order_process(ev, g, SimConfig(eps=e, dt=DT, horizon=50.0, n_trajectories=4, seed=7))
        fracs[e] = empirical_generator(short, g.S_star)["delta_fraction"]
    seq = [fracs[e] for e in (0.15, 0.12, 0.10)]
    delta_ok = fracs[0.10] < 0.1 and seq[0] > seq[1] > seq[2]
    rate_ok = abs(rate / r_y - 1) <= 0.3
    cv_ok = 0.8 <= cv <= 1.2
    dt = time.perf_counter() - t0
    ok = rate_ok and cv_ok and delta_ok
    record_criterion(
        6,
        ok,
        f"rate {rate:.4f} vs r_y {r_y:.4f} ({int(np.sum(rep['jump_counts']))} jumps); holding CV {cv:.3f}; "
        f"delta fraction {', '.join(f'{e}: {f:.4f}' for e, f in zip((0.15, 0.12, 0.10), seq))}; {dt:.0f} s",
    )
    assert ok


def test_criterion_7_test_function():
    t0 = time.perf_counter()
    ev = _spec("double_well_c1.yaml")
    g = analyze(ev)
    sigma = g.gates[0].sigma
    eps_list = (0.1, 0.05, 0.025)
    bnd_ok = True
    jump = 0.0
    for e in eps_list:
        b = boundary_check(SaddleBox(sigma, e, g.H), n=1000)
        bnd_ok &= b["max_err_plus"] == 0.0 and b["max_err_minus"] == 0.0
        jump = max(jump, b["junction_jump"])
    fixture_gates = [analyze(_spec(n)).gates for n in ("double_well_c1.yaml", "double_well_c2.yaml", "triple_well.yaml")]
    ident = max(skew_identity_check(gt.sigma)["identity_residual"] for gates in fixture_gates for gt in gates)
    rng = np.random.default_rng(7)
    synth = max(skew_identity_check(synthetic_saddle(rng, 2 + k % 3))["identity_residual"] for k in range(50))
    res = [residual_quadrature(SaddleBox(sigma, e, g.H), ev, g.h)["residual"] for e in eps_list]
    decreasing = res[0] > res[1] > res[2]
    dt = time.perf_counter() - t0
    ok = bnd_ok and jump < 1e-10 and ident < 1e-10 and synth < 1e-10 and decreasing and dt < 60
    record_criterion(
        7,
        ok,
        f"boundary exact {bnd_ok}, junction {jump:.1e}, identity {max(ident, synth):.1e}, "
        f"residuals {', '.join(f'{e}: {r:.4f}' for e, r in zip(eps_list, res))}, {dt:.1f} s",
    )
    assert ok


def test_criterion_8_determinism(tmp_path):
    out = tmp_path / "out"
    args = ["all", "--spec", str(FIXTURES / "double_well_c1.yaml"), "--out", str(out),
            "--eps", "0.3,0.25", "--traj", "20", "--order-traj", "2", "--horizon", "3"]
    assert main(args) == 0
    first = tmp_path / "first"
    shutil.copytree(out, first)
    assert main(args) == 0
    names = sorted(p.name for p in first.iterdir() if p.name != "timings.json")
    same = [n for n in names if (first / n).read_bytes() == (out / n).read_bytes()]
    ok = same == names and sorted(p.name for p in out.iterdir()) == sorted(p.name for p in first.iterdir())
    record_criterion(8, ok, f"{len(same)}/{len(names)} files identical (timings.json excluded)")
    assert ok
