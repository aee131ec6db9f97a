"""The auxiliary chain x on wells, the limiting chain y on the deepest wells,
and the potential theory connecting them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ModelError, NumericError


@dataclass(frozen=True, eq=False)
class FiniteChain:
    """Reversible chain given by symmetric conductances and a holding measure.

    ``rates[i, j] = conductance[i, j] / measure[i]``.  For x the conductances
    are the omega weights and the measure is m; for y they are beta and nu.
    """

    conductance: np.ndarray
    measure: np.ndarray
    states: tuple[int, ...]
    kind: str = "x"

    def __post_init__(self):
        c = self.conductance
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] != self.measure.size:
            raise ValueError("conductance must be square and match the measure")
        if not np.array_equal(c, c.T):
            raise ValueError("conductance matrix must be symmetric")
        if np.any(np.diag(c) != 0) or np.any(c < 0):
            raise ValueError("conductances must be non-negative with zero diagonal")
        if np.any(self.measure <= 0):
            raise ValueError("holding measure must be strictly positive")

    @property
    def K(self) -> int:
        return self.measure.size

    @property
    def rates(self) -> np.ndarray:
        return self.conductance / self.measure[:, None]

    @property
    def generator(self) -> np.ndarray:
        r = self.rates
        return r - np.diag(r.sum(axis=1))

    def index(self, labels) -> list[int]:
        pos = {s: k for k, s in enumerate(self.states)}
        return [pos[s] for s in labels]

    def apply(self, g) -> np.ndarray:
        """(L g)(i) = sum_j r(i, j) (g_j - g_i)."""
        g = np.asarray(g, dtype=float)
        return self.rates @ g - self.rates.sum(axis=1) * g

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "states": list(self.states),
            "conductance": self.conductance.tolist(),
            "measure": self.measure.tolist(),
            "rates": self.rates.tolist(),
        }


def chain_from_omega(omega, states=None) -> FiniteChain:
    omega = np.asarray(omega, dtype=float)
    w = omega.sum(axis=1)
    if np.any(w <= 0):
        bad = [int(k) for k in np.flatnonzero(w <= 0)]
        raise ModelError(
            f"wells {bad} have no gate (omega_i = 0); the H-sublevel closure is disconnected, "
            "analyse each connected component separately"
        )
    states = tuple(range(omega.shape[0])) if states is None else tuple(states)
    return FiniteChain(omega, w / w.sum(), states, "x")


def chain_from_landscape(graph, component=None) -> FiniteChain:
    """The chain x on the wells of ``graph`` (optionally one connected component)."""
    omega = graph.omega
    if component is None:
        return chain_from_omega(omega)
    idx = list(component)
    return chain_from_omega(omega[np.ix_(idx, idx)], states=idx)


def _components(cond) -> list[list[int]]:
    K = cond.shape[0]
    seen = [-1] * K
    out = []
    for s in range(K):
        if seen[s] >= 0:
            continue
        stack, comp = [s], []
        seen[s] = len(out)
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in np.flatnonzero(cond[a] > 0):
                if seen[b] < 0:
                    seen[b] = len(out)
                    stack.append(int(b))
        out.append(sorted(comp))
    return out


def _harmonic_solve(matrix, fixed, values):
    """Solve sum_j matrix[i, j] (h_j - h_i) = 0 off ``fixed`` with h = values on it.

    States whose component touches no fixed state get 0 and are returned
    in the second value.
    """
    K = matrix.shape[0]
    h = np.zeros(K)
    fixed = list(fixed)
    h[fixed] = values
    free = [k for k in range(K) if k not in set(fixed)]
    stranded = []
    if free:
        fixed_set = set(fixed)
        sym = matrix + matrix.T
        for comp in _components(sym):
            if not fixed_set.intersection(comp):
                stranded.extend(k for k in comp if k not in fixed_set)
        solvable = [k for k in free if k not in set(stranded)]
        if solvable:
            A = matrix[np.ix_(solvable, solvable)] - np.diag(matrix[solvable].sum(axis=1))
            b = -matrix[np.ix_(solvable, fixed)] @ h[fixed]
            h[solvable] = np.linalg.solve(A, b)
    return h, stranded


def equilibrium_potential(chain: FiniteChain, A, B) -> np.ndarray:
    """h_{A,B}: 1 on A, 0 on B, harmonic elsewhere (states given as chain labels)."""
    a, b = chain.index(A), chain.index(B)
    if not a or not b:
        raise ValueError("A and B must be nonempty")
    if set(a) & set(b):
        raise ValueError("A and B must be disjoint")
    h, stranded = _harmonic_solve(chain.conductance, a + b, [1.0] * len(a) + [0.0] * len(b))
    if stranded:
        warnings.warn(f"states {[chain.states[k] for k in stranded]} are not connected to A or B; set to 0")
    return h


def dirichlet_form(chain: FiniteChain, f, g, check: bool = True) -> float:
    """Half the conductance-weighted sum of products of increments.

    With ``check`` the generator form sum_i measure(i) f(i) (-L g)(i) is
    computed too and must agree.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    df = f[:, None] - f[None, :]
    dg = g[:, None] - g[None, :]
    val = 0.5 * float(np.sum(chain.conductance * df * dg))
    if check:
        alt = float(np.dot(chain.measure * f, -chain.apply(g)))
        scale = max(1.0, float(np.sum(np.abs(chain.conductance * df * dg))))
        if abs(val - alt) > 1e-10 * scale:
            raise NumericError(f"Dirichlet form mismatch: {val} vs {alt}")
    return val


def capacity(chain: FiniteChain, A, B) -> float:
    if not list(A) or not list(B):
        return 0.0
    h = equilibrium_potential(chain, A, B)
    return dirichlet_form(chain, h, h)


@dataclass(frozen=True, eq=False)
class BetaMatrix:
    states: tuple[int, ...]
    values: np.ndarray

    def to_dict(self) -> dict:
        return {"states": list(self.states), "values": self.values.tolist()}


def beta_matrix(chain: FiniteChain, S_star) -> BetaMatrix:
    S = tuple(S_star)
    if len(S) < 2:
        raise ModelError("the Markov chain description is trivial when |S_star| = 1")
    single = {i: capacity(chain, [i], [k for k in S if k != i]) for i in S}
    n = len(S)
    beta = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            i, j = S[a], S[b]
            rest = [k for k in S if k not in (i, j)]
            val = 0.5 * (single[i] + single[j] - capacity(chain, [i, j], rest))
            beta[a, b] = beta[b, a] = val
    scale = max(1.0, float(np.max(np.abs(beta))))
    if np.any(beta < -1e-12 * scale):
        raise NumericError(f"negative beta coefficient: {beta.min()}")
    return BetaMatrix(S, beta)


def limiting_chain(beta: BetaMatrix, nu) -> FiniteChain:
    """The chain y on S_star with rates beta_ij / nu_i."""
    nu = np.asarray(nu, dtype=float)
    cond = np.where(beta.values > 0, beta.values, 0.0)
    return FiniteChain(cond, nu, beta.states, "y")


def harmonic_extension(chain: FiniteChain, S_star, u) -> np.ndarray:
    """Extend ``u`` from S_star to all states, harmonic for the chain elsewhere."""
    idx = chain.index(S_star)
    if not idx:
        raise ValueError("S_star must be nonempty")
    h, stranded = _harmonic_solve(chain.conductance, idx, np.asarray(u, dtype=float))
    if stranded:
        warnings.warn(f"states {[chain.states[k] for k in stranded]} are disconnected from S_star")
    return h


def dirichlet_form_y(ychain: FiniteChain, u, v) -> float:
    """Dirichlet form of y against the normalized measure nu / nu_star."""
    u = np.asarray(u, dtype=float)
    nu_star = float(ychain.measure.sum())
    return float(np.dot(ychain.measure / nu_star * u, -ychain.apply(v)))


def trace_oracle(chain: FiniteChain, S_star) -> np.ndarray:
    """m(i) r^tr(i, j) on S_star, with r^tr the jump rates of the trace of x.

    Hitting probabilities come from a linear solve with the rate matrix,
    independent of the capacity pipeline.
    """
    S = chain.index(S_star)
    if len(S) < 2:
        raise ModelError("trace oracle needs |S_star| >= 2")
    r = chain.rates
    out_set = [k for k in range(chain.K) if k not in set(S)]
    n = len(S)
    result = np.zeros((n, n))
    hit = np.zeros((n, chain.K))
    for b, j in enumerate(S):
        # P_k[hit j before S_star \ {j}]
        vals = np.array([1.0 if k == j else 0.0 for k in S])
        hk = np.zeros(chain.K)
        hk[S] = vals
        if out_set:
            Lg = r - np.diag(r.sum(axis=1))
            A = Lg[np.ix_(out_set, out_set)]
            rhs = -Lg[np.ix_(out_set, S)] @ vals
            try:
                hk[out_set] = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError as exc:
                raise NumericError("trace oracle: singular hitting-probability system") from exc
        hit[b] = hk
    for a, i in enumerate(S):
        for b, j in enumerate(S):
            if a == b:
                continue
            rate = r[i, j] + sum(r[i, k] * hit[b, k] for k in out_set)
            result[a, b] = chain.measure[i] * rate
    return result


def analyze_chains(graph, component=None) -> dict:
    """Everything the chains artifact reports for one connected component."""
    x = chain_from_landscape(graph, component)
    S_star = [s for s in graph.S_star if s in x.states]
    out = {"x": x.to_dict(), "S_star": S_star}
    if len(S_star) < 2:
        out["notice"] = "the Markov chain description is trivial when |S_star| = 1"
        return out
    beta = beta_matrix(x, S_star)
    nu = np.array([graph.wells[i].nu for i in S_star])
    y = limiting_chain(beta, nu)
    oracle = trace_oracle(x, S_star)
    caps = {
        f"{i}|{','.join(map(str, [k for k in S_star if k != i]))}": capacity(
            x, [i], [k for k in S_star if k != i]
        )
        for i in S_star
    }
    # energy identity for harmonic extensions of indicator vectors
    identity = []
    nu_star = float(nu.sum())
    for a in range(len(S_star)):
        u = np.eye(len(S_star))[a]
        ut = harmonic_extension(x, S_star, u)
        lhs = dirichlet_form(x, ut, ut)
        rhs = nu_star * dirichlet_form_y(y, u, u)
        identity.append({"u": u.tolist(), "D_x": lhs, "nu_star_D_y": rhs, "residual": abs(lhs - rhs)})
    out.update(
        capacities=caps,
        beta=beta.to_dict(),
        y=y.to_dict(),
        trace_oracle=oracle.tolist(),
        oracle_residual=float(np.max(np.abs(oracle - beta.values))),
        energy_identity=identity,
    )
    return out
