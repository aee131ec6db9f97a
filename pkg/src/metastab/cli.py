"""Command line driver: analyze, chains, simulate, verify, all.

Artifacts are written to ``--out``.  Each JSON artifact records the hash of
the configuration it came from; later stages refuse stale inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .chain import analyze_chains
from .errors import MetastabError, ModelError, SpecParseError, StaleArtifactError
from .landscape import LandscapeGraph, analyze, build_landscape, find_critical_points, laplace_check
from .potential import (
    check_structure,
    corner_growth_warnings,
    derivative_selfcheck,
    halton,
    load_spec,
    spec_hash,
)
from .sim import (
    SimConfig,
    check_dt,
    default_dt,
    empirical_generator,
    run_order_process,
    run_transition_ensemble,
)
from .testfn import testfn_report

EXIT_PARSE, EXIT_MODEL, EXIT_STALE, EXIT_VERIFY = 2, 3, 4, 5


class VerifyFailed(MetastabError):
    pass


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(path: Path, obj) -> None:
    text = json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise StaleArtifactError(f"{what} not found at {path}; run the earlier stage first")
    return json.loads(path.read_text(encoding="utf-8"))


def _check_hash(doc: dict, expected: str, what: str) -> None:
    if doc.get("spec_hash") != expected:
        raise StaleArtifactError(f"{what} was produced from a different configuration; rerun it")


def _eps_list(args, spec) -> list[float]:
    if args.eps:
        vals = [float(v) for v in args.eps.split(",") if v.strip()]
    else:
        vals = list(spec.epsilons)
    if not vals or any(v <= 0 for v in vals):
        raise SpecParseError("epsilon list must be nonempty and positive", field="--eps")
    return vals


class Run:
    """Shared state for one CLI invocation."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.spec = load_spec(args.spec)
        self.hash = spec_hash(self.spec)
        self.ev = self.spec.field_eval()
        self.files: list[str] = []
        self.timings: dict[str, float] = {}

    def emit(self, name: str, obj) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(self.out / name, obj)
        self.files.append(name)

    def stage(self, name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            self.timings[name] = time.perf_counter() - t0

    def graph(self) -> LandscapeGraph:
        doc = read_json(self.out / "landscape.json", "landscape.json")
        _check_hash(doc, self.hash, "landscape.json")
        return LandscapeGraph.from_dict(doc)

    def manifest(self, command: str) -> None:
        a = self.args
        params = {
            "eps": _eps_list(a, self.spec),
            "level_H": self.spec.level_H,
            "seed": a.seed if a.seed is not None else self.spec.seed,
            "traj": a.traj,
            "order_traj": a.order_traj,
            "horizon": a.horizon,
            "dt": a.dt,
            "J": a.J,
            "quadrature": a.quadrature,
        }
        files = sorted(set(self.files))
        self.emit(
            "manifest.json",
            {
                "spec": str(a.spec),
                "spec_hash": self.hash,
                "command": command,
                "parameters": params,
                "output_dir": str(a.out),
                "files": files,
                "version": __version__,
            },
        )
        # wall-clock is not reproducible; kept out of the manifest
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "timings.json").write_text(
            json.dumps({k: round(v, 6) for k, v in self.timings.items()}, sort_keys=True, indent=2) + "\n"
        )


# ----------------------------------------------------------------------------
# stages


def stage_analyze(run: Run) -> LandscapeGraph:
    graph = analyze(run.ev)
    eps = _eps_list(run.args, run.spec)
    doc = graph.to_dict(eps)
    doc["spec_hash"] = run.hash
    doc["dimension"] = run.ev.dim
    doc["growth_warnings"] = corner_growth_warnings(run.ev)
    run.emit("landscape.json", doc)
    for msg in graph.notices:
        print(f"notice: {msg}", file=sys.stderr)
    return graph


def stage_chains(run: Run) -> dict:
    graph = run.graph()
    comps = graph.components if graph.components else (tuple(range(graph.K)),)
    results = []
    for comp in comps:
        S_comp = [s for s in graph.S_star if s in comp]
        if len(comp) < 2 or len(S_comp) < 2:
            results.append({"component": list(comp), "notice": "the Markov chain description is trivial"})
            continue
        res = analyze_chains(graph, component=comp if len(comps) > 1 else None)
        res["component"] = list(comp)
        results.append(res)
    if not any("beta" in r for r in results):
        raise ModelError("fewer than two deepest wells: the Markov chain description is trivial")
    doc = {"spec_hash": run.hash, "components": results, "S_star": list(graph.S_star)}
    run.emit("chains.json", doc)
    return doc


def _sim_config(run: Run, graph, eps: float, n: int, **kw) -> SimConfig:
    a = run.args
    dt = a.dt if a.dt is not None else default_dt(graph)
    seed = a.seed if a.seed is not None else run.spec.seed
    return SimConfig(eps=eps, dt=dt, horizon=a.horizon, n_trajectories=n, seed=seed, **kw)


def stage_simulate(run: Run) -> dict:
    graph = run.graph()
    chains = read_json(run.out / "chains.json", "chains.json")
    _check_hash(chains, run.hash, "chains.json")
    if not graph.connected:
        raise ModelError("simulation needs a connected H-sublevel closure")
    comp = next(c for c in chains["components"] if "beta" in c)
    r_y = np.array(comp["y"]["rates"])
    S = list(graph.S_star)
    a = run.args
    trans_rows, order_rows, per_eps = [], [], []
    for eps in _eps_list(a, run.spec):
        cfg = _sim_config(run, graph, eps, a.traj)
        warnings_ = check_dt(cfg, graph)
        ens = run_transition_ensemble(run.ev, graph, cfg)
        theta = math.exp(ens["log_theta"])
        for r in ens.pop("records"):
            tau = r.steps * cfg.dt
            trans_rows.append([eps, r.trajectory, r.start, r.target, tau, tau / theta, r.status])
        ocfg = _sim_config(run, graph, eps, a.order_traj)
        logs = run_order_process(run.ev, graph, ocfg)
        for log in logs:
            for s, h, cens in log.holdings:
                order_rows.append([eps, log.trajectory, s, h, int(cens)])
        emp = empirical_generator(logs, S)
        rates = np.array(emp["rates"])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(r_y > 0, rates / r_y, np.nan)
        emp["predicted_rates"] = r_y
        emp["rate_ratio"] = ratio
        emp["horizon_rescaled"] = ocfg.horizon
        emp["n_trajectories"] = ocfg.n_trajectories
        per_eps.append({"eps": eps, "dt": cfg.dt, "warnings": warnings_, "ensemble": ens, "order_process": emp})
    run.out.mkdir(parents=True, exist_ok=True)
    with open(run.out / "transitions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps", "trajectory", "from_valley", "to_valley", "tau_natural", "tau_rescaled", "status"])
        w.writerows([[repr(e), t, f, to, repr(tn), repr(tr), st] for e, t, f, to, tn, tr, st in trans_rows])
    with open(run.out / "orderpath.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eps", "trajectory", "state", "holding_rescaled", "censored"])
        w.writerows([[repr(e), t, s, repr(h), c] for e, t, s, h, c in order_rows])
    run.files += ["transitions.csv", "orderpath.csv"]
    summary = {"spec_hash": run.hash, "S_star": S, "runs": per_eps}
    run.emit("summary.json", summary)
    return summary


def _check(results: list, name: str, ok: bool, detail) -> None:
    results.append({"check": name, "status": "PASS" if ok else "FAIL", "detail": detail})


def stage_verify(run: Run) -> dict:
    ev, a = run.ev, run.args
    checks: list = []
    notices: list = []
    lo, hi = np.asarray(run.spec.lower), np.asarray(run.spec.upper)
    pts = halton(256, ev.dim, lo, hi)

    if ev.has_ell:
        st = check_structure(ev)
        _check(checks, "ell orthogonal to grad U and divergence free", st["passed"], st)
    worst = 0.0
    for x in pts[:32]:
        worst = max(worst, derivative_selfcheck(ev, x)["max_error"])
    _check(checks, "finite-difference derivative agreement", worst < 1e-6, {"max_error": worst})

    cps = find_critical_points(ev)
    graph = build_landscape(cps, ev)
    graph_full = build_landscape(cps, ev, full_drift=True)
    same = [w.minima for w in graph.wells] == [w.minima for w in graph_full.wells] and [
        (g.i, g.j) for g in graph.gates
    ] == [(g.i, g.j) for g in graph_full.gates]
    _check(checks, "well labels agree for gradient and full drift descent", same, None)
    om = graph.omega
    _check(checks, "omega symmetric with zero diagonal", bool(np.array_equal(om, om.T) and not np.any(np.diag(om))), None)
    if graph.K < 2:
        notices.append("single well: no gates to check")
    elif graph.connected:
        _check(checks, "omega_i positive", bool(np.all(graph.omega_i > 0)), graph.omega_i)
    else:
        notices.append("H-sublevel closure is disconnected")
    for g in graph.gates:
        s = g.sigma
        tag = f"gate {g.i}-{g.j}"
        _check(checks, f"{tag}: v . e1 > 0", float(s.v @ s.basis[:, 0]) > 1e-8, float(s.v @ s.basis[:, 0]))
        if not ev.has_ell:
            dev = max(abs(s.mu - s.lam[0]), float(np.min([np.max(np.abs(s.v - s.basis[:, 0])), np.max(np.abs(s.v + s.basis[:, 0]))])))
            _check(checks, f"{tag}: reversible case mu = lambda_1 and v = e1", dev < 1e-10, dev)

    if len(graph.S_star) >= 2 and graph.connected:
        ch = analyze_chains(graph)
        _check(checks, "beta equals trace-oracle flux", ch["oracle_residual"] < 1e-10, ch["oracle_residual"])
        lem = max(c["residual"] for c in ch["energy_identity"])
        _check(checks, "harmonic extension Dirichlet identity", lem < 1e-10, lem)

    eps = _eps_list(a, run.spec)
    quad = a.quadrature and ev.dim <= 3
    if a.quadrature and not quad:
        notices.append("quadrature checks skipped: dimension above 3")
    tf_eps = [e for e in eps if e < 1]
    report = testfn_report(ev, graph, tf_eps, J=a.J, quadrature=quad)
    report["spec_hash"] = run.hash
    for gt in report["gates"]:
        tag = f"gate {gt['i']}-{gt['j']}"
        _check(checks, f"{tag}: skew identity", gt["identity_residual"] < 1e-10, gt["identity_residual"])
        _check(checks, f"{tag}: H L skew", gt["skew_residual"] < 1e-10, gt["skew_residual"])
        _check(checks, f"{tag}: spectra of H+L and H-L^T agree", gt["spectral_mismatch"] < 1e-10, gt["spectral_mismatch"])
        _check(checks, f"{tag}: exact boundary values and continuity", all(b["passed"] for b in gt["boundary"]), None)
    _check(checks, "synthetic skew identity", report["synthetic_identity_max"] < 1e-9, report["synthetic_identity_max"])
    if quad and "residuals" in report:
        _check(checks, "saddle residual strictly decreasing in eps", report["residual_strictly_decreasing"],
               [[r["eps"], [g["residual"] for g in r["gates"]]] for r in report["residuals"]])
        lap = []
        for e in eps:
            rep = laplace_check(ev, graph, e, rtol=1e-6)
            lap.append({k: v for k, v in rep.items() if k != "refinement_trace"})
            if not rep["boundary_ok"]:
                notices.append(f"eps={e}: Gibbs weight not negligible at the domain boundary")
        report["laplace"] = lap
    run.emit("testfn_report.json", report)
    failed = [c["check"] for c in checks if c["status"] == "FAIL"]
    summary = {"spec_hash": run.hash, "checks": checks, "notices": notices, "failed": failed}
    run.emit("verify.json", summary)
    for c in checks:
        print(f"{c['status']}  {c['check']}", file=sys.stderr)
    if failed:
        raise VerifyFailed("; ".join(failed))
    return summary


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metastab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("analyze", "critical points, wells, gates and constants -> landscape.json"),
        ("chains", "finite chains, capacities and beta -> chains.json"),
        ("simulate", "Euler-Maruyama ensembles -> transitions.csv, orderpath.csv, summary.json"),
        ("verify", "property checks -> testfn_report.json, verify.json"),
        ("all", "run every stage in order"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--spec", required=True, help="YAML configuration")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--eps", default=None, help="comma-separated noise levels (default: from config)")
        s.add_argument("--traj", type=int, default=50, help="first-hit trajectories per eps")
        s.add_argument("--order-traj", type=int, default=4, help="order-process trajectories per eps")
        s.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (default: from config)")
        s.add_argument("--horizon", type=float, default=10.0, help="horizon in units of theta_eps")
        s.add_argument("--dt", type=float, default=None, help="time step (default min(1e-3, 0.1/lambda_max))")
        s.add_argument("--J", type=float, default=4.0, help="saddle box size multiplier")
        s.add_argument("--quadrature", action="store_true", help="include quadrature checks in verify")
    return p


STAGES = {
    "analyze": [("analyze", stage_analyze)],
    "chains": [("chains", stage_chains)],
    "simulate": [("simulate", stage_simulate)],
    "verify": [("verify", stage_verify)],
    "all": [
        ("analyze", stage_analyze),
        ("chains", stage_chains),
        ("simulate", stage_simulate),
        ("verify", stage_verify),
    ],
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_PARSE
    if args.traj < 1 or args.order_traj < 1:
        print("error: trajectory counts must be positive", file=sys.stderr)
        return EXIT_PARSE
    run = None
    try:
        run = Run(args)
        _eps_list(args, run.spec)
        for name, fn in STAGES[args.command]:
            run.stage(name, lambda fn=fn: fn(run))
    except SpecParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except StaleArtifactError as exc:
        print(f"stale or missing artifact: {exc}", file=sys.stderr)
        return EXIT_STALE
    except VerifyFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        run.manifest(args.command)
        return EXIT_VERIFY
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    run.manifest(args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
