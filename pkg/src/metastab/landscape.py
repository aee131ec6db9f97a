"""Critical points, the well/gate graph at a level H, and continuum constants."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ModelError
from .potential import FieldEval, halton
from .quadrature import integrate_ball, integrate_box, tensor_rule

NEWTON_TOL = 1e-10
DEDUP_TOL = 1e-6
MORSE_TOL = 1e-8
LEVEL_TOL = 1e-8
DESCENT_OFFSET = 1e-3

MINIMUM = "minimum"
SADDLE = "index1_saddle"
OTHER = "other"


@dataclass(frozen=True, eq=False)
class CriticalPoint:
    x: np.ndarray
    U: float
    hess: np.ndarray
    jac: np.ndarray
    eigvals: np.ndarray
    kind: str
    # index-1 saddles only
    lam: np.ndarray | None = None  # (lambda_1, ..., lambda_d), all positive
    basis: np.ndarray | None = None  # columns e_1..e_d of the Hessian eigenbasis
    mu: float | None = None
    v: np.ndarray | None = None

    @property
    def e1(self):
        return None if self.basis is None else self.basis[:, 0]

    def to_dict(self) -> dict:
        out = {
            "x": self.x.tolist(),
            "U": float(self.U),
            "hess": self.hess.tolist(),
            "jac": self.jac.tolist(),
            "eigvals": self.eigvals.tolist(),
            "kind": self.kind,
        }
        if self.kind == SADDLE and self.mu is not None:
            out.update(
                lam=self.lam.tolist(),
                basis=self.basis.tolist(),
                mu=float(self.mu),
                v=self.v.tolist(),
            )
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CriticalPoint":
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(
            x=arr("x"),
            U=float(d["U"]),
            hess=arr("hess"),
            jac=arr("jac"),
            eigvals=arr("eigvals"),
            kind=d["kind"],
            lam=arr("lam"),
            basis=arr("basis"),
            mu=d.get("mu"),
            v=arr("v"),
        )


def _classify(x, ev: FieldEval, morse_tol=MORSE_TOL) -> CriticalPoint:
    hess = ev.hess(x)
    eig = np.linalg.eigvalsh(hess)
    if np.any(np.abs(eig) < morse_tol):
        raise ModelError(
            f"degenerate critical point at {np.round(x, 10).tolist()}: Hessian eigenvalues {eig.tolist()}"
        )
    n_neg = int(np.sum(eig < 0))
    kind = MINIMUM if n_neg == 0 else SADDLE if n_neg == 1 else OTHER
    cp = CriticalPoint(
        x=np.asarray(x, dtype=float),
        U=float(ev.U(x)),
        hess=hess,
        jac=ev.jac_ell(x),
        eigvals=eig,
        kind=kind,
    )
    if kind == SADDLE:
        cp = classify_saddle(cp, ev)
    return cp


def _newton(ev: FieldEval, x0, lo, hi, tol, max_iter=100):
    x = np.array(x0, dtype=float)
    span = hi - lo
    for _ in range(max_iter):
        g = ev.grad(x)
        if np.linalg.norm(g) < tol:
            return _polish(ev, x)
        try:
            step = np.linalg.solve(ev.hess(x), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(ev.hess(x), g, rcond=None)[0]
        x = x - step
        if not np.all(np.isfinite(x)) or np.any(x < lo - span) or np.any(x > hi + span):
            return None
    # a few iterations may stall just above tol from roundoff
    return x if np.linalg.norm(ev.grad(x)) < tol else None


def _polish(ev: FieldEval, x, steps=3):
    """Extra Newton steps, kept while they reduce |grad U|."""
    best = np.linalg.norm(ev.grad(x))
    for _ in range(steps):
        try:
            y = x - np.linalg.solve(ev.hess(x), ev.grad(x))
        except np.linalg.LinAlgError:
            break
        gy = np.linalg.norm(ev.grad(y))
        if not gy < best:
            break
        x, best = y, gy
    return x


def find_critical_points(
    ev: FieldEval,
    seeds_per_axis: int = 9,
    newton_tol: float = NEWTON_TOL,
    dedup_tol: float = DEDUP_TOL,
    morse_tol: float = MORSE_TOL,
    lower=None,
    upper=None,
) -> list[CriticalPoint]:
    """Newton's method on grad U from a regular grid of seeds in the domain box.

    Completeness is best effort.  Diverging seeds are dropped silently; a
    converged point with a near-singular Hessian raises :class:`ModelError`.
    """
    if seeds_per_axis < 2:
        raise ValueError("seeds_per_axis must be >= 2")
    lo = np.asarray(ev.spec.lower if lower is None else lower, dtype=float)
    hi = np.asarray(ev.spec.upper if upper is None else upper, dtype=float)
    axes = [np.linspace(a, b, seeds_per_axis) for a, b in zip(lo, hi)]
    found: list[np.ndarray] = []
    for seed in itertools.product(*axes):
        x = _newton(ev, seed, lo, hi, newton_tol)
        if x is None:
            continue
        if any(np.linalg.norm(x - y) < dedup_tol for y in found):
            continue
        found.append(x)
    found.sort(key=lambda p: tuple(np.round(p, 9)))
    return [_classify(x, ev, morse_tol) for x in found]


def classify_saddle(cp: CriticalPoint, ev: FieldEval | None = None) -> CriticalPoint:
    """Fill lambda's, the Hessian eigenbasis, mu and v for an index-1 saddle.

    ``e_1`` is given a canonical sign here (largest component positive);
    :func:`build_landscape` re-orients it toward the lower-indexed well.
    """
    if cp.kind != SADDLE:
        raise ModelError("classify_saddle needs an index-1 saddle")
    H, L = cp.hess, cp.jac
    w, Q = np.linalg.eigh(H)
    e1 = Q[:, 0]
    if e1[np.argmax(np.abs(e1))] < 0:
        Q[:, 0] = -e1
    lam = np.concatenate([[-w[0]], w[1:]])

    scale = max(1.0, float(np.max(np.abs(H))) + float(np.max(np.abs(L))))
    ev_plus = np.linalg.eigvals(H + L)
    neg = ev_plus[ev_plus.real < 0]
    if neg.size != 1:
        raise ModelError(f"H+L at {cp.x.tolist()} has {neg.size} eigenvalues with negative real part")
    if abs(neg[0].imag) > 1e-10 * scale:
        raise ModelError(f"negative eigenvalue of H+L at {cp.x.tolist()} is not real: {neg[0]}")
    mu = -float(neg[0].real)

    M = H - L.T
    vals, vecs = np.linalg.eig(M)
    negm = np.flatnonzero(vals.real < 0)
    if negm.size != 1:
        raise ModelError(f"H-L^T at {cp.x.tolist()} has {negm.size} eigenvalues with negative real part")
    k = int(negm[0])
    if abs(vals[k].real + mu) > 1e-8 * scale or abs(vals[k].imag) > 1e-10 * scale:
        raise ModelError("H-L^T and H+L disagree on the negative eigenvalue")
    # refine v as the null vector of M + mu I (real arithmetic)
    _, _, vt = np.linalg.svd(M + mu * np.eye(M.shape[0]))
    v = vt[-1]
    if np.dot(v, vecs[:, k].real) < 0 and np.linalg.norm(vecs[:, k].real) > 0:
        v = -v
    v = v / np.linalg.norm(v)
    if np.dot(v, Q[:, 0]) < 0:
        v = -v
    if np.dot(v, Q[:, 0]) <= 1e-8:
        raise ModelError(f"v is orthogonal to e1 at {cp.x.tolist()}")
    return replace(cp, lam=lam, basis=Q, mu=mu, v=v)


def ek_constant(sigma: CriticalPoint) -> float:
    """Eyring-Kramers prefactor mu / (2 pi sqrt(-det H))."""
    det = float(np.linalg.det(sigma.hess))
    if det >= 0 or sigma.mu is None:
        raise ModelError(f"point {sigma.x.tolist()} is not a classified index-1 saddle (det H = {det})")
    return sigma.mu / (2.0 * math.pi * math.sqrt(-det))


# ----------------------------------------------------------------------------
# landscape graph


@dataclass(frozen=True)
class Gate:
    i: int
    j: int
    sigma: CriticalPoint
    omega: float


@dataclass(frozen=True)
class Well:
    minima: tuple[int, ...]  # indices into LandscapeGraph.minima
    deepest: tuple[int, ...]
    h: float
    nu: float


@dataclass(frozen=True, eq=False)
class LandscapeGraph:
    H: float
    r0: float
    minima: tuple[CriticalPoint, ...]
    wells: tuple[Well, ...]
    gates: tuple[Gate, ...]
    internal_saddles: tuple[CriticalPoint, ...] = ()
    components: tuple[tuple[int, ...], ...] = ()
    notices: tuple[str, ...] = ()
    r0_ok: bool = True

    @property
    def K(self) -> int:
        return len(self.wells)

    @property
    def h(self) -> float:
        return min(w.h for w in self.wells)

    @property
    def nu(self) -> np.ndarray:
        return np.array([w.nu for w in self.wells])

    @property
    def omega(self) -> np.ndarray:
        om = np.zeros((self.K, self.K))
        for g in self.gates:
            om[g.i, g.j] += g.omega
            om[g.j, g.i] += g.omega
        return om

    @property
    def omega_i(self) -> np.ndarray:
        return self.omega.sum(axis=1)

    @property
    def S_star(self) -> tuple[int, ...]:
        h = self.h
        tol = LEVEL_TOL * max(1.0, abs(h))
        return tuple(i for i, w in enumerate(self.wells) if w.h - h <= tol)

    @property
    def nu_star(self) -> float:
        return float(sum(self.wells[i].nu for i in self.S_star))

    @property
    def connected(self) -> bool:
        return len(self.components) <= 1

    def theta(self, eps: float) -> float:
        return math.exp((self.H - self.h) / eps)

    def log_theta(self, eps: float) -> float:
        return (self.H - self.h) / eps

    def valley_centers(self, wells=None):
        """Centres and well labels of the r0-balls forming the valleys."""
        wells = range(self.K) if wells is None else wells
        centers, labels = [], []
        for i in wells:
            for m in self.wells[i].deepest:
                centers.append(self.minima[m].x)
                labels.append(i)
        return np.array(centers), np.array(labels, dtype=np.int64)

    def to_dict(self, epsilons=()) -> dict:
        return {
            "level_H": self.H,
            "r0": self.r0,
            "r0_condition_ok": self.r0_ok,
            "minima": [m.to_dict() for m in self.minima],
            "wells": [
                {
                    "index": i,
                    "minima": list(w.minima),
                    "deepest": list(w.deepest),
                    "h": w.h,
                    "nu": w.nu,
                }
                for i, w in enumerate(self.wells)
            ],
            "gates": [
                {"i": g.i, "j": g.j, "omega": g.omega, "sigma": g.sigma.to_dict()} for g in self.gates
            ],
            "internal_saddles": [s.to_dict() for s in self.internal_saddles],
            "omega": self.omega.tolist(),
            "h": self.h,
            "S_star": list(self.S_star),
            "nu_star": self.nu_star,
            "components": [list(c) for c in self.components],
            "connected": self.connected,
            "notices": list(self.notices),
            "theta": [
                {"eps": e, "log_theta": self.log_theta(e), "theta": _safe_exp(self.log_theta(e))}
                for e in epsilons
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LandscapeGraph":
        return cls(
            H=float(d["level_H"]),
            r0=float(d["r0"]),
            minima=tuple(CriticalPoint.from_dict(m) for m in d["minima"]),
            wells=tuple(
                Well(tuple(w["minima"]), tuple(w["deepest"]), float(w["h"]), float(w["nu"]))
                for w in d["wells"]
            ),
            gates=tuple(
                Gate(int(g["i"]), int(g["j"]), CriticalPoint.from_dict(g["sigma"]), float(g["omega"]))
                for g in d["gates"]
            ),
            internal_saddles=tuple(CriticalPoint.from_dict(s) for s in d.get("internal_saddles", [])),
            components=tuple(tuple(c) for c in d.get("components", [])),
            notices=tuple(d.get("notices", [])),
            r0_ok=bool(d.get("r0_condition_ok", True)),
        )


def _safe_exp(a):
    return math.exp(a) if a < 700 else None


def descend(ev: FieldEval, x0, minima, tol=DEDUP_TOL, full_drift=False, t_max=1e4):
    """Follow the gradient (or full) flow from ``x0`` until within ``tol`` of a minimum.

    Returns the index into ``minima`` or raises :class:`ModelError`.
    """
    pts = np.array([m.x for m in minima])

    def rhs(_t, x):
        return ev.drift(x) if full_drift else -ev.grad(x)

    def hit(_t, x):
        return float(np.min(np.linalg.norm(pts - x, axis=1))) - tol

    hit.terminal = True
    hit.direction = -1
    t0, x = 0.0, np.asarray(x0, dtype=float)
    if hit(0.0, x) <= 0:
        return int(np.argmin(np.linalg.norm(pts - x, axis=1)))
    while t0 < t_max:
        sol = solve_ivp(rhs, (t0, t0 + 50.0), x, method="RK45", rtol=1e-10, atol=1e-12, events=hit)
        if sol.status == 1:
            return int(np.argmin(np.linalg.norm(pts - sol.y[:, -1], axis=1)))
        if sol.status < 0:
            break
        t0, x = sol.t[-1], sol.y[:, -1]
        if np.linalg.norm(ev.grad(x)) < 1e-9:
            break
    raise ModelError(f"descent from {np.round(x0, 8).tolist()} did not reach a known minimum")


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_landscape(
    points: list[CriticalPoint],
    ev: FieldEval,
    H: float | None = None,
    r0: float | None = None,
    level_tol: float = LEVEL_TOL,
    delta0: float = DESCENT_OFFSET,
    full_drift: bool = False,
) -> LandscapeGraph:
    """Group minima into wells of {U < H} and attach level-H gate saddles.

    Saddles strictly below H merge the minima their two descents reach; saddles
    at level H join two different wells (a gate) or the same well (internal,
    excluded).
    """
    H = ev.spec.level_H if H is None else H
    r0 = ev.spec.r0 if r0 is None else r0
    tol_H = level_tol * max(1.0, abs(H))
    all_minima = [p for p in points if p.kind == MINIMUM]
    minima = [p for p in all_minima if p.U < H - tol_H]
    if not minima:
        raise ModelError(f"no local minimum below H = {H}")
    if not H > min(m.U for m in minima):
        raise ModelError("level_H must lie above the minimum of U")
    saddles = [p for p in points if p.kind == SADDLE]
    notices = []
    for p in points:
        if p.kind == OTHER and abs(p.U - H) <= tol_H:
            notices.append(f"critical point of index >= 2 at level H: {p.x.tolist()} (ignored)")

    uf = _UnionFind(len(minima))
    level_saddles = []
    for s in saddles:
        if s.U < H - tol_H:
            a = descend(ev, s.x + delta0 * s.e1, minima, full_drift=full_drift)
            b = descend(ev, s.x - delta0 * s.e1, minima, full_drift=full_drift)
            uf.union(a, b)
        elif abs(s.U - H) <= tol_H:
            level_saddles.append(s)

    roots = sorted({uf.find(k) for k in range(len(minima))})
    groups = [[k for k in range(len(minima)) if uf.find(k) == r] for r in roots]
    # wells numbered by their lexicographically smallest minimum; minima are sorted already
    groups.sort(key=lambda g: g[0])
    well_of = {k: w for w, g in enumerate(groups) for k in g}

    wells = []
    for g in groups:
        h = min(minima[k].U for k in g)
        tol = level_tol * max(1.0, abs(h))
        deepest = tuple(k for k in g if minima[k].U - h <= tol)
        nu = sum(1.0 / math.sqrt(np.linalg.det(minima[k].hess)) for k in deepest)
        wells.append(Well(tuple(g), deepest, float(h), float(nu)))

    gates, internal = [], []
    for s in level_saddles:
        a = well_of[descend(ev, s.x + delta0 * s.e1, minima, full_drift=full_drift)]
        b = well_of[descend(ev, s.x - delta0 * s.e1, minima, full_drift=full_drift)]
        if a == b:
            internal.append(s)
            notices.append(f"saddle at {s.x.tolist()} connects well {a} to itself; excluded from gates")
            continue
        if a > b:
            # e1 must point toward the lower-indexed well
            s = replace(s, basis=np.column_stack([-s.basis[:, 0], s.basis[:, 1:]]), v=-s.v)
            a, b = b, a
        gates.append(Gate(a, b, s, ek_constant(s)))
    gates.sort(key=lambda g: (g.i, g.j, tuple(g.sigma.x)))

    uf2 = _UnionFind(len(wells))
    for g in gates:
        uf2.union(g.i, g.j)
    comp_roots = sorted({uf2.find(k) for k in range(len(wells))})
    components = tuple(tuple(k for k in range(len(wells)) if uf2.find(k) == r) for r in comp_roots)
    if len(components) > 1:
        notices.append(
            "H-sublevel closure is disconnected; analysis applies per connected component "
            + str([list(c) for c in components])
        )
    if not gates:
        notices.append("no gate saddles at level H")

    graph = LandscapeGraph(
        H=float(H),
        r0=float(r0),
        minima=tuple(minima),
        wells=tuple(wells),
        gates=tuple(gates),
        internal_saddles=tuple(internal),
        components=components,
        notices=tuple(notices),
    )
    ok, msgs = check_r0(graph, ev, points)
    if len(graph.S_star) < 2:
        msgs.append("|S_star| = 1: the Markov chain description is trivial")
    return replace(graph, r0_ok=ok, notices=graph.notices + tuple(msgs))


def check_r0(graph: LandscapeGraph, ev: FieldEval, points) -> tuple[bool, list[str]]:
    """Check that each closed 2 r0 ball around a deepest minimum avoids other
    critical points and stays in {U < H} (sampled)."""
    ok, msgs = True, []
    r2 = 2 * graph.r0
    d = ev.dim
    # directions on the sphere from a low-discrepancy cloud
    dirs = halton(256, d, -np.ones(d), np.ones(d))
    dirs = dirs[np.linalg.norm(dirs, axis=1) > 1e-3]
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    radii = np.linspace(0.0, r2, 9)[1:]
    for i, w in enumerate(graph.wells):
        for k in w.deepest:
            m = graph.minima[k].x
            for p in points:
                dist = np.linalg.norm(p.x - m)
                if 0 < dist <= r2 and dist > DEDUP_TOL:
                    ok = False
                    msgs.append(f"r0 condition: critical point {p.x.tolist()} within 2*r0 of minimum {m.tolist()}")
            samples = m + (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)
            if np.any(ev.U(samples) >= graph.H):
                ok = False
                msgs.append(f"r0 condition: ball of radius 2*r0 around {m.tolist()} leaves the well")
    return ok, msgs


def analyze(ev: FieldEval, seeds_per_axis: int = 9, H=None, r0=None, full_drift=False) -> LandscapeGraph:
    pts = find_critical_points(ev, seeds_per_axis)
    return build_landscape(pts, ev, H=H, r0=r0, full_drift=full_drift)


# ----------------------------------------------------------------------------
# Laplace asymptotics


def laplace_check(ev: FieldEval, graph: LandscapeGraph, eps: float, rtol: float = 1e-7) -> dict:
    """Quadrature of Z_eps and mu_eps(V_i) against their Laplace asymptotics."""
    d = ev.dim
    if d > 3:
        raise ValueError("laplace_check supports d <= 3")
    h = graph.h
    lo, hi = ev.spec.lower, ev.spec.upper

    def weight(x):
        return np.exp(-(ev.U(x) - h) / eps)

    # boundary leakage check on the faces of the box
    face_pts, _ = tensor_rule(lo, hi, 4, order=4)
    lo_a, hi_a = np.asarray(lo), np.asarray(hi)
    boundary = []
    for k in range(d):
        for val in (lo_a[k], hi_a[k]):
            pts = face_pts.copy()
            pts[:, k] = val
            boundary.append(weight(pts).max())
    boundary_max = float(max(boundary)) if boundary else 0.0

    panels = max(8, int(math.ceil(max(hi_a - lo_a) / math.sqrt(eps) / 2)))
    Zs, ztrace = integrate_box(weight, lo, hi, panels=panels, rtol=rtol)
    Z_pred = (2 * math.pi * eps) ** (d / 2) * graph.nu_star
    valleys = []
    mass_star = 0.0
    for i in range(graph.K):
        mass = 0.0
        for k in graph.wells[i].deepest:
            val, _ = integrate_ball(weight, graph.minima[k].x, graph.r0, rtol=rtol)
            mass += val
        mu_v = mass / Zs
        entry = {"well": i, "mu_eps": mu_v}
        if i in graph.S_star:
            mass_star += mu_v
            pred = graph.wells[i].nu / graph.nu_star
            entry.update(predicted=pred, ratio=mu_v / pred)
        valleys.append(entry)
    return {
        "eps": eps,
        "Z_scaled": Zs,
        "Z_predicted_scaled": Z_pred,
        "Z_ratio": Zs / Z_pred,
        "valleys": valleys,
        "mu_delta": 1.0 - mass_star,
        "boundary_weight_max": boundary_max,
        "boundary_ok": boundary_max < 1e-12,
        "refinement_trace": [[p, v] for p, v in ztrace],
    }


def laplace_quick(ev: FieldEval, graph: LandscapeGraph, eps: float) -> dict:
    """Lower-accuracy variant used by the CLI report."""
    return laplace_check(ev, graph, eps, rtol=1e-6)

