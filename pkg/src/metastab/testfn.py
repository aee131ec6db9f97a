"""Saddle boxes and the test functions p (one gate) and Q (global blend).

Box coordinates: a point is written ``x = sigma + sum_k y_k e_k`` with e_k the
Hessian eigenbasis at the saddle, e_1 pointing toward the lower-indexed well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ModelError
from .landscape import SADDLE, CriticalPoint, classify_saddle, descend
from .potential import FieldEval, halton
from .quadrature import integrate_box


@dataclass(frozen=True, eq=False)
class SaddleBox:
    sigma: CriticalPoint
    eps: float
    H: float
    J: float = 4.0

    def __post_init__(self):
        if self.sigma.kind != SADDLE or self.sigma.mu is None:
            raise ModelError("a saddle box needs a classified index-1 saddle")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")

    @property
    def delta(self) -> float:
        return math.sqrt(self.eps * math.log(1.0 / self.eps))

    @property
    def eta(self) -> float:
        return self.eps**2

    @property
    def half(self) -> np.ndarray:
        lam = self.sigma.lam
        h = 2.0 * self.J * self.delta / np.sqrt(lam)
        h[0] = self.J * self.delta / math.sqrt(lam[0])
        return h

    @property
    def outer(self) -> float:
        """e_1-coordinate of the outer faces of the enlarged boundaries."""
        return self.half[0] + self.eta

    @property
    def level(self) -> float:
        """K_eps = {U < H + J^2 delta^2}."""
        return self.H + (self.J * self.delta) ** 2

    @property
    def scale(self) -> float:
        return math.sqrt(self.eps / self.sigma.mu)

    @property
    def normalizer(self) -> float:
        return math.sqrt(2.0 * math.pi * self.eps / self.sigma.mu)

    def to_local(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self.sigma.x) @ self.sigma.basis

    def to_global(self, y) -> np.ndarray:
        return self.sigma.x + np.asarray(y, dtype=float) @ self.sigma.basis.T

    # membership predicates, on local coordinates
    def in_core(self, y) -> np.ndarray:
        y = np.atleast_2d(y)
        return np.all(np.abs(y) <= self.half, axis=1)

    def in_enlarged(self, y) -> np.ndarray:
        """Membership in the core or one of the two enlarged boundaries."""
        y = np.atleast_2d(y)
        return (np.abs(y[:, 0]) <= self.outer) & np.all(np.abs(y[:, 1:]) <= self.half[1:], axis=1)

    def in_K(self, ev: FieldEval, y) -> np.ndarray:
        return ev.U(self.to_global(np.atleast_2d(y))) < self.level

    def in_B(self, ev: FieldEval, y) -> np.ndarray:
        return self.in_core(y) & self.in_K(ev, y)

    def in_E(self, ev: FieldEval, y) -> np.ndarray:
        """B together with the enlarged boundaries over the faces of B."""
        y = np.atleast_2d(y)
        proj = y.copy()
        proj[:, 0] = np.clip(y[:, 0], -self.half[0], self.half[0])
        return self.in_enlarged(y) & self.in_K(ev, proj)


def _p_core(box: SaddleBox, y) -> np.ndarray:
    a = y @ (box.sigma.basis.T @ box.sigma.v)
    return ndtr(a / box.scale)


def p_local(box: SaddleBox, y) -> np.ndarray:
    """p in box coordinates; exact 1 and 0 on the outer faces."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if not np.all(box.in_enlarged(y)):
        raise ValueError("point outside the enlarged saddle box")
    a1 = box.half[0]
    out = np.empty(y.shape[0])
    core = np.abs(y[:, 0]) <= a1
    out[core] = _p_core(box, y[core])
    plus = y[:, 0] > a1
    if np.any(plus):
        bar = y[plus].copy()
        bar[:, 0] = a1
        out[plus] = 1.0 + (y[plus, 0] - box.outer) / box.eta * (1.0 - _p_core(box, bar))
    minus = y[:, 0] < -a1
    if np.any(minus):
        bar = y[minus].copy()
        bar[:, 0] = -a1
        out[minus] = (y[minus, 0] + box.outer) / box.eta * _p_core(box, bar)
    return out


def p_eval(box: SaddleBox, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    val = p_local(box, box.to_local(np.atleast_2d(x)))
    return float(val[0]) if x.ndim == 1 else val


def adjoint_p(box: SaddleBox, ev: FieldEval, x) -> np.ndarray:
    """The adjoint generator applied to the core formula of p.

    Expanded divergence form: eps Lap p - grad U . grad p + ell . grad p
    + p div ell - p (grad U . ell) / eps.  The last two vanish for admissible
    fields and are kept so that violations show up in the residual.
    """
    x = np.atleast_2d(x)
    v, mu, eps = box.sigma.v, box.sigma.mu, box.eps
    a = (x - box.sigma.x) @ v
    dens = np.exp(-mu * a * a / (2 * eps)) / box.normalizer
    p = ndtr(a / box.scale)
    grad = ev.grad(x)
    ell = ev.ell(x)
    lap = -mu * a / eps * dens
    drift = ((ell - grad) @ v) * dens
    div = np.trace(ev.jac_ell(x), axis1=-2, axis2=-1) if ev.has_ell else 0.0
    dot = np.sum(grad * ell, axis=1)
    return eps * lap + drift + p * (div - dot / eps)


def _Z_scaled(ev: FieldEval, h: float, eps: float, rtol=1e-8) -> float:
    lo, hi = np.asarray(ev.spec.lower), np.asarray(ev.spec.upper)
    panels = max(8, int(math.ceil(max(hi - lo) / math.sqrt(eps) / 2)))
    val, _ = integrate_box(lambda x: np.exp(-(ev.U(x) - h) / eps), lo, hi, panels=panels, rtol=rtol)
    return val


def residual_quadrature(box: SaddleBox, ev: FieldEval, h: float, panels=8, rtol=1e-6, Zs=None) -> dict:
    """theta * integral over B of |L* p| d mu_eps, by Gauss-Legendre in box coordinates.

    ``h`` is the global minimum level; the value is computed as
    int |L* p| exp(-(U - H)/eps) dx / int exp(-(U - h)/eps) dx.
    """
    if ev.dim > 3:
        raise ValueError("residual quadrature supports d <= 3")
    eps = box.eps
    Zs = _Z_scaled(ev, h, eps) if Zs is None else Zs

    def integrand(y):
        x = box.to_global(y)
        U = ev.U(x)
        w = np.exp(-(U - box.H) / eps) * (U < box.level)
        return np.abs(adjoint_p(box, ev, x)) * w

    val, trace = integrate_box(integrand, -box.half, box.half, panels=panels, rtol=rtol)
    agree = abs(trace[-1][1] - trace[-2][1]) <= 0.01 * abs(trace[-1][1])
    return {
        "eps": eps,
        "J": box.J,
        "residual": val / Zs,
        "Z_scaled": Zs,
        "levels": [[p, v / Zs] for p, v in trace],
        "two_level_agreement": bool(agree),
    }


# ----------------------------------------------------------------------------
# algebraic identities


def skew_identity_check(sigma: CriticalPoint) -> dict:
    H, L = sigma.hess, sigma.jac
    try:
        Hinv_v = np.linalg.solve(H, sigma.v)
    except np.linalg.LinAlgError as exc:
        raise ModelError("singular Hessian at the saddle") from exc
    e1 = sigma.basis[:, 0]
    lhs = float(np.dot(sigma.v + L @ Hinv_v, e1))
    rhs = float(sigma.mu / sigma.lam[0] * np.dot(sigma.v, e1))
    HL = H @ L
    return {
        "identity_residual": abs(lhs - rhs),
        "skew_residual": float(np.max(np.abs(HL + HL.T))),
        "v_dot_e1": float(np.dot(sigma.v, e1)),
    }


def spectral_match(sigma: CriticalPoint) -> float:
    """Distance between the spectra of H + L and H - L^T, matched as multisets."""
    a = np.sort_complex(np.linalg.eigvals(sigma.hess + sigma.jac))
    b = np.sort_complex(np.linalg.eigvals(sigma.hess - sigma.jac.T))
    # greedy matching is enough for small d
    b = list(b)
    worst = 0.0
    for z in a:
        k = int(np.argmin([abs(z - w) for w in b]))
        worst = max(worst, abs(z - b.pop(k)))
    return float(worst)


def synthetic_saddle(rng: np.random.Generator, d: int) -> CriticalPoint:
    """Random index-1 Hessian with L = H^{-1} A for a random skew A."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = rng.uniform(0.5, 3.0, d)
    lam[0] = -lam[0]
    H = (Q * lam) @ Q.T
    H = 0.5 * (H + H.T)
    A = rng.standard_normal((d, d))
    A = A - A.T
    L = np.linalg.solve(H, A)
    cp = CriticalPoint(
        x=np.zeros(d), U=0.0, hess=H, jac=L, eigvals=np.linalg.eigvalsh(H), kind=SADDLE
    )
    return classify_saddle(cp)


# ----------------------------------------------------------------------------
# global test function


class QFunction:
    """The blend Q^g: g(i) on the wells, p-interpolated across each gate box."""

    def __init__(self, ev: FieldEval, graph, eps: float, J: float = 4.0):
        self.ev = ev
        self.graph = graph
        self.boxes = [SaddleBox(g.sigma, eps, graph.H, J) for g in graph.gates]
        self.pairs = [(g.i, g.j) for g in graph.gates]
        self._minima = list(graph.minima)
        self._well_of = {k: w for w, well in enumerate(graph.wells) for k in well.minima}
        self._check_disjoint()

    def _check_disjoint(self, n=512):
        for a, A in enumerate(self.boxes):
            u = halton(n, self.ev.dim, -np.ones(self.ev.dim), np.ones(self.ev.dim))
            pts = A.to_global(u * np.r_[A.outer, A.half[1:]])
            for b, B in enumerate(self.boxes):
                if a != b and np.any(B.in_enlarged(B.to_local(pts))):
                    raise ModelError(f"saddle boxes {a} and {b} overlap; decrease J or eps")

    def well_of_point(self, x) -> int:
        k = descend(self.ev, x, self._minima, tol=min(0.5 * self.graph.r0, 0.1))
        return self._well_of[k]

    def __call__(self, g, x) -> np.ndarray:
        """Evaluate at points ``x``; returns (values, clamped mask) for points
        outside K_eps."""
        g = np.asarray(g, dtype=float)
        X = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(X.shape[0])
        clamped = np.zeros(X.shape[0], dtype=bool)
        done = np.zeros(X.shape[0], dtype=bool)
        for box, (i, j) in zip(self.boxes, self.pairs):
            y = box.to_local(X)
            inside = box.in_enlarged(y)
            clash = inside & done
            if np.any(clash):
                raise ModelError("point lies in two saddle boxes")
            if np.any(inside):
                p = p_local(box, y[inside])
                out[inside] = g[j] + (g[i] - g[j]) * p
                done |= inside
        level = max((b.level for b in self.boxes), default=self.graph.H)
        U = self.ev.U(X)
        for k in np.flatnonzero(~done):
            out[k] = g[self.well_of_point(X[k])]
            clamped[k] = U[k] >= level
        return out, clamped


def boundary_check(box: SaddleBox, n: int = 1000, seed: int = 0, p=None) -> dict:
    """Values on the outer faces and the jump across the core/extension junction."""
    rng = np.random.default_rng(seed)
    p = (lambda y: p_local(box, y)) if p is None else p
    d = box.sigma.x.size
    y = rng.uniform(-1, 1, (n, d)) * box.half
    plus, minus = y.copy(), y.copy()
    plus[:, 0] = box.outer
    minus[:, 0] = -box.outer
    err_plus = float(np.max(np.abs(p(plus) - 1.0)))
    err_minus = float(np.max(np.abs(p(minus))))
    a1 = box.half[0]
    jump = 0.0
    for sgn in (1.0, -1.0):
        core = y.copy()
        core[:, 0] = sgn * a1
        ext = core.copy()
        ext[:, 0] = sgn * np.nextafter(a1, np.inf)
        jump = max(jump, float(np.max(np.abs(p(core) - p(ext)))))
    return {
        "n": n,
        "max_err_plus": err_plus,
        "max_err_minus": err_minus,
        "junction_jump": jump,
        "passed": err_plus == 0.0 and err_minus == 0.0 and jump < 1e-10,
    }


def testfn_report(ev: FieldEval, graph, eps_list, J: float = 4.0, quadrature: bool = True, n_synthetic=50, seed=0):
    gates = []
    for g in graph.gates:
        s = g.sigma
        entry = {"i": g.i, "j": g.j, "x": s.x.tolist(), **skew_identity_check(s)}
        entry["spectral_mismatch"] = spectral_match(s)
        entry["boundary"] = [boundary_check(SaddleBox(s, e, graph.H, J)) for e in eps_list]
        gates.append(entry)
    rng = np.random.default_rng(seed)
    synth = []
    for k in range(n_synthetic):
        cp = synthetic_saddle(rng, 2 + k % 3)
        synth.append(skew_identity_check(cp)["identity_residual"])
    report = {
        "J": J,
        "eps": list(eps_list),
        "gates": gates,
        "synthetic_identity_max": float(max(synth)) if synth else 0.0,
        "n_synthetic": n_synthetic,
    }
    if quadrature and ev.dim <= 3 and graph.gates:
        table = []
        for e in eps_list:
            Zs = _Z_scaled(ev, graph.h, e)
            row = {"eps": e}
            row["gates"] = [
                residual_quadrature(SaddleBox(g.sigma, e, graph.H, J), ev, graph.h, Zs=Zs) for g in graph.gates
            ]
            table.append(row)
        report["residuals"] = table
        ordered = sorted(table, key=lambda r: -r["eps"])
        mono = all(
            all(b["gates"][k]["residual"] < a["gates"][k]["residual"] for k in range(len(graph.gates)))
            for a, b in zip(ordered, ordered[1:])
        )
        report["residual_strictly_decreasing"] = mono
    elif quadrature:
        report["notice"] = "quadrature skipped: needs d <= 3 and at least one gate"
    return report
