"""Euler-Maruyama simulation of the diffusion, first-hit ensembles, and the
order process obtained by stopping the clock outside the deepest valleys.

Randomness: trajectory ``k`` of a run with seed ``s`` draws its normals from a
Philox stream keyed by ``SeedSequence([s, purpose, k])``, so results do not
depend on how trajectories are scheduled.  Normals are drawn in blocks by
numpy and consumed by a compiled stepping kernel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ModelError, NumericError
from .potential import FieldEval

BLOCK = 1 << 16
_ENSEMBLE, _ORDER = 0, 1
Z95 = 1.959963984540054


# ----------------------------------------------------------------------------
# compiled kernels
#
# The drift of a given potential is emitted as straight-line scalar code and
# spliced into the stepping loops below before compilation.  Generic loops over
# coefficient arrays were several times slower.

_HIT_TEMPLATE = """
def hit_block(x, noise, nsteps, dt, sq, start, centers, labels, r2):
    nc = centers.shape[0]
{LOAD}
    for n in range(nsteps):
{DRIFT}
{UPDATE}
        if not ({FINITE}):
{STORE}
            return n + 1, -1, -1
        lab = -1
        for k in range(nc):
            if {DIST} <= r2:
                lab = labels[k]
                break
        if lab >= 0 and lab != start:
{STORE}
            return n + 1, lab, 0
{STORE0}
    return nsteps, -1, 0
"""

_ORDER_TEMPLATE = """
def order_block(x, st, noise, nsteps, step0, dt, sq, centers, labels, r2,
                ev_from, ev_to, ev_hold, ev_step, record_visits, vis_lab, vis_step):
    nc = centers.shape[0]
{LOAD}
    state = st[0]
    hold = st[1]
    vstar = st[2]
    delta = st[3]
    nev = st[4]
    last = st[6]
    nvis = st[7]
    done = nsteps
    for n in range(nsteps):
        lab = -1
        for k in range(nc):
            if {DIST} <= r2:
                lab = labels[k]
                break
        if record_visits and lab != last:
            vis_lab[nvis] = lab
            vis_step[nvis] = step0 + n
            nvis += 1
            last = lab
        if lab >= 0:
            if lab != state:
                ev_from[nev] = state
                ev_to[nev] = lab
                ev_hold[nev] = hold
                ev_step[nev] = step0 + n
                nev += 1
                state = lab
                hold = 0
            hold += 1
            vstar += 1
        else:
            delta += 1
{DRIFT}
{UPDATE}
        if not ({FINITE}):
            st[5] = -1
            done = n + 1
            break
{STORE0}
    st[0] = state
    st[1] = hold
    st[2] = vstar
    st[3] = delta
    st[4] = nev
    st[6] = last
    st[7] = nvis
    return done
"""

_KERNELS: dict = {}


def _monomial(coeff, powers):
    factors = [repr(float(coeff))]
    for j, e in enumerate(powers):
        if e == 1:
            factors.append(f"x{j}")
        elif e > 1:
            factors.append(f"x{j}_{e}")
    return "*".join(factors)


def _drift_source(ev: FieldEval, indent: str) -> str:
    d = ev.dim
    coeffs = np.asarray(ev.coeffs, dtype=float)
    powers = np.asarray(ev.powers, dtype=np.int64).reshape(-1, d)
    lines = []
    maxp = int(powers.max(initial=0))
    for j in range(d):
        for e in range(2, maxp + 1):
            prev = f"x{j}" if e == 2 else f"x{j}_{e - 1}"
            lines.append(f"x{j}_{e} = {prev}*x{j}")
    for k in range(d):
        terms = []
        for c, p in zip(coeffs, powers):
            if p[k] > 0 and c != 0.0:
                q = p.copy()
                q[k] -= 1
                terms.append(_monomial(c * p[k], q))
        lines.append(f"g{k} = " + (" + ".join(terms) if terms else "0.0"))
    if ev.has_ell:
        J = np.asarray(ev.J, dtype=float)
        lines.append("u = " + " + ".join(_monomial(c, p) for c, p in zip(coeffs, powers)))
        for r in range(d):
            parts = [f"g{r}"]
            for c in range(d):
                poly = J[:, r, c]
                if not np.any(poly != 0.0):
                    continue
                # Horner in u
                expr = repr(float(poly[-1]))
                for a in poly[-2::-1]:
                    expr = f"({expr})*u + {float(a)!r}"
                parts.append(f"({expr})*g{c}")
            lines.append(f"dr{r} = -(" + " + ".join(parts) + ")")
    else:
        for r in range(d):
            lines.append(f"dr{r} = -g{r}")
    return "\n".join(indent + ln for ln in lines)


def _kernels(ev: FieldEval):
    key = (ev.coeffs.tobytes(), ev.powers.tobytes(), np.asarray(ev.J).tobytes(), ev.dim)
    if key in _KERNELS:
        return _KERNELS[key]
    d = ev.dim
    ind = " " * 8
    fill = {
        "LOAD": "\n".join(f"    x{j} = x[{j}]" for j in range(d)),
        "DRIFT": _drift_source(ev, ind),
        "UPDATE": "\n".join(f"{ind}x{j} = x{j} + dr{j}*dt + sq*noise[n, {j}]" for j in range(d)),
        "FINITE": " and ".join(f"abs(x{j}) < 1e300" for j in range(d)),
        "DIST": " + ".join(f"(x{j} - centers[k, {j}])**2" for j in range(d)),
        "STORE": "\n".join(f"{ind}    x[{j}] = x{j}" for j in range(d)),
        "STORE0": "\n".join(f"    x[{j}] = x{j}" for j in range(d)),
    }
    ns: dict = {}
    exec(_HIT_TEMPLATE.format(**fill), ns)
    exec(_ORDER_TEMPLATE.format(**fill), ns)
    out = (njit(ns["hit_block"]), njit(ns["order_block"]))
    _KERNELS[key] = out
    return out


# ----------------------------------------------------------------------------
# configuration


def lambda_max(graph) -> float:
    pts = list(graph.minima) + [g.sigma for g in graph.gates] + list(graph.internal_saddles)
    return float(max(np.max(np.abs(p.eigvals)) for p in pts))


def default_dt(graph) -> float:
    return min(1e-3, 0.1 / lambda_max(graph))


@dataclass(frozen=True)
class SimConfig:
    eps: float
    dt: float
    horizon: float = 20.0  # in units of theta_eps
    n_trajectories: int = 1
    seed: int = 0
    start_valley: int | None = None
    start_point: tuple[float, ...] | None = None
    max_natural_time: float | None = None  # ensemble censoring; default horizon * theta
    record_visits: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")


def check_dt(cfg: SimConfig, graph) -> list[str]:
    stab = 0.2 / lambda_max(graph)
    if cfg.dt > stab:
        msg = f"dt = {cfg.dt} exceeds the stability bound 0.2/lambda_max = {stab:.4g}"
        warnings.warn(msg)
        return [msg]
    return []


def em_step(x, ev: FieldEval, eps: float, dt: float, noise) -> np.ndarray:
    """One Euler-Maruyama step of dx = -(grad U + ell) dt + sqrt(2 eps) dW."""
    x = np.asarray(x, dtype=float)
    out = x + ev.drift(x) * dt + math.sqrt(2.0 * eps * dt) * np.asarray(noise, dtype=float)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite state after a step of size {dt}; reduce dt")
    return out


def stream(seed: int, purpose: int, traj: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, purpose, traj])))


class _Setup:
    def __init__(self, ev: FieldEval, graph, cfg: SimConfig):
        S = graph.S_star
        centers, labels = graph.valley_centers(S)
        self.centers = np.ascontiguousarray(centers, dtype=float)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.r2 = graph.r0**2
        self.hit_block, self.order_block = _kernels(ev)
        self.d = ev.dim
        self.sq = math.sqrt(2.0 * cfg.eps * cfg.dt)
        self.log_theta = graph.log_theta(cfg.eps)
        self.theta = math.exp(self.log_theta)

    def start(self, graph, cfg: SimConfig):
        if cfg.start_point is not None:
            x0 = np.array(cfg.start_point, dtype=float)
            dist = np.sum((self.centers - x0) ** 2, axis=1)
            inside = np.flatnonzero(dist <= self.r2)
            return x0, int(self.labels[inside[0]]) if inside.size else -1
        i = graph.S_star[0] if cfg.start_valley is None else cfg.start_valley
        if i not in graph.S_star:
            raise ModelError(f"start valley {i} is not one of the deepest wells {list(graph.S_star)}")
        k = graph.wells[i].deepest[0]
        return graph.minima[k].x.copy(), i


# ----------------------------------------------------------------------------
# first-hit ensembles


@dataclass
class HitRecord:
    trajectory: int
    start: int
    target: int  # -1 when censored or aborted
    steps: int
    status: str  # "hit" | "censored" | "aborted"


def first_hit(ev: FieldEval, graph, cfg: SimConfig, traj: int, setup: _Setup | None = None) -> HitRecord:
    setup = setup or _Setup(ev, graph, cfg)
    x, start = setup.start(graph, cfg)
    max_t = cfg.max_natural_time if cfg.max_natural_time is not None else cfg.horizon * setup.theta
    max_steps = int(math.ceil(max_t / cfg.dt))
    rng = stream(cfg.seed, _ENSEMBLE, traj)
    used = 0
    while used < max_steps:
        n = min(BLOCK, max_steps - used)
        noise = rng.standard_normal((n, setup.d))
        k, lab, status = setup.hit_block(
            x, noise, n, cfg.dt, setup.sq, start, setup.centers, setup.labels, setup.r2
        )
        used += k
        if status < 0:
            return HitRecord(traj, start, -1, used, "aborted")
        if lab >= 0:
            return HitRecord(traj, start, int(lab), used, "hit")
    return HitRecord(traj, start, -1, used, "censored")


def _mean_ci(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, (math.nan, math.nan), math.nan
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if v.size > 1 else math.nan
    half = Z95 * sd / math.sqrt(v.size) if v.size > 1 else math.nan
    return mean, (mean - half, mean + half), sd


def run_transition_ensemble(ev: FieldEval, graph, cfg: SimConfig) -> dict:
    """Mean first time to reach another deepest valley, in units of theta."""
    setup = _Setup(ev, graph, cfg)
    records = [first_hit(ev, graph, cfg, k, setup) for k in range(cfg.n_trajectories)]
    _, start = setup.start(graph, cfg)
    tau = np.array([r.steps * cfg.dt for r in records if r.status == "hit"])
    rescaled = tau / setup.theta
    mean, ci, sd = _mean_ci(rescaled)
    censored = sum(r.status == "censored" for r in records)
    aborted = sum(r.status == "aborted" for r in records)
    n = len(records)
    om = graph.omega_i
    predicted = graph.wells[start].nu / om[start] if start >= 0 and om[start] > 0 else math.nan
    flags = []
    if censored / n > 0.2:
        flags.append("unreliable: more than 20% of trajectories censored")
    if aborted:
        flags.append(f"{aborted} trajectories aborted on a non-finite state")
    if tau.size < 30:
        flags.append("low power: fewer than 30 completed transitions")
    return {
        "eps": cfg.eps,
        "dt": cfg.dt,
        "seed": cfg.seed,
        "start_valley": start,
        "n_trajectories": n,
        "n_hit": int(tau.size),
        "censored_fraction": censored / n,
        "aborted": aborted,
        "log_theta": setup.log_theta,
        "mean_rescaled": mean,
        "ci95_rescaled": list(ci),
        "sd_rescaled": sd,
        "predicted_rescaled": predicted,
        "ratio": mean / predicted if predicted == predicted else math.nan,
        "flags": flags,
        "records": records,
    }


# ----------------------------------------------------------------------------
# order process


@dataclass
class TransitionLog:
    trajectory: int
    dt: float
    theta: float
    jumps: list[tuple[int, int, int]]  # (from, to, natural step index)
    holdings: list[tuple[int, float, bool]]  # (state, duration in theta units, censored)
    vstar_steps: int
    delta_steps: int
    total_steps: int
    status: str = "ok"
    visits: np.ndarray | None = field(default=None, repr=False)  # (label, entry step, exit step)

    @property
    def delta_fraction(self) -> float:
        return self.delta_steps / self.total_steps if self.total_steps else math.nan

    def path(self):
        return [(s, h) for s, h, _ in self.holdings]


def order_process(ev: FieldEval, graph, cfg: SimConfig, traj: int, setup: _Setup | None = None) -> TransitionLog:
    setup = setup or _Setup(ev, graph, cfg)
    x, start = setup.start(graph, cfg)
    total = int(math.ceil(cfg.horizon * setup.theta / cfg.dt))
    rng = stream(cfg.seed, _ORDER, traj)
    st = np.array([start, 0, 0, 0, 0, 0, -2, 0], dtype=np.int64)
    ev_from = np.zeros(BLOCK, dtype=np.int64)
    ev_to = np.zeros(BLOCK, dtype=np.int64)
    ev_hold = np.zeros(BLOCK, dtype=np.int64)
    ev_step = np.zeros(BLOCK, dtype=np.int64)
    vis_lab = np.zeros(BLOCK if cfg.record_visits else 1, dtype=np.int64)
    vis_step = np.zeros_like(vis_lab)
    jumps, holds, visits = [], [], []
    used = 0
    while used < total:
        n = min(BLOCK, total - used)
        noise = rng.standard_normal((n, setup.d))
        st[4] = 0
        st[7] = 0
        k = setup.order_block(
            x, st, noise, n, used, cfg.dt, setup.sq, setup.centers, setup.labels, setup.r2,
            ev_from, ev_to, ev_hold, ev_step,
            cfg.record_visits, vis_lab, vis_step,
        )
        for e in range(st[4]):
            jumps.append((int(ev_from[e]), int(ev_to[e]), int(ev_step[e])))
            holds.append((int(ev_from[e]), int(ev_hold[e]) * cfg.dt / setup.theta, False))
        for e in range(st[7]):
            visits.append((int(vis_lab[e]), int(vis_step[e])))
        used += k
        if st[5] < 0:
            break
    if st[0] >= 0:
        holds.append((int(st[0]), int(st[1]) * cfg.dt / setup.theta, True))
    vis_arr = None
    if cfg.record_visits:
        rows = []
        for a, (lab, s0) in enumerate(visits):
            s1 = visits[a + 1][1] if a + 1 < len(visits) else used
            rows.append((lab, s0, s1))
        vis_arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    return TransitionLog(
        trajectory=traj,
        dt=cfg.dt,
        theta=setup.theta,
        jumps=jumps,
        holdings=holds,
        vstar_steps=int(st[2]),
        delta_steps=int(st[3]),
        total_steps=used,
        status="aborted" if st[5] < 0 else "ok",
        visits=vis_arr,
    )


def run_order_process(ev: FieldEval, graph, cfg: SimConfig) -> list[TransitionLog]:
    if cfg.start_valley is None and cfg.start_point is None:
        # spread starting valleys over S_star deterministically
        S = graph.S_star
        return [
            order_process(ev, graph, _with_start(cfg, S[k % len(S)]), k) for k in range(cfg.n_trajectories)
        ]
    setup = _Setup(ev, graph, cfg)
    return [order_process(ev, graph, cfg, k, setup) for k in range(cfg.n_trajectories)]


def _with_start(cfg: SimConfig, i: int) -> SimConfig:
    from dataclasses import replace

    return replace(cfg, start_valley=i)


def empirical_generator(logs: list[TransitionLog], S_star) -> dict:
    """Jump-rate estimates of the order process and diagnostics."""
    S = list(S_star)
    pos = {s: k for k, s in enumerate(S)}
    n = len(S)
    counts = np.zeros((n, n), dtype=np.int64)
    hold_total = np.zeros(n)
    complete = [[] for _ in S]
    for log in logs:
        for a, b, _ in log.jumps:
            counts[pos[a], pos[b]] += 1
        for s, h, cens in log.holdings:
            hold_total[pos[s]] += h
            if not cens:
                complete[pos[s]].append(h)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = counts / hold_total[:, None]
    rel = np.where(counts > 0, Z95 / np.sqrt(np.maximum(counts, 1)), np.nan)
    lo, hi = rates * (1 - rel), rates * (1 + rel)
    cv = []
    for h in complete:
        h = np.asarray(h)
        cv.append(float(h.std(ddof=1) / h.mean()) if h.size > 1 else math.nan)
    all_h = np.concatenate([np.asarray(h) for h in complete]) if any(complete) else np.array([])
    cv_all = float(all_h.std(ddof=1) / all_h.mean()) if all_h.size > 1 else math.nan
    delta_steps = sum(log.delta_steps for log in logs)
    total_steps = sum(log.total_steps for log in logs)
    out_jumps = counts.sum(axis=1)
    flags = [f"state {S[k]}: only {int(out_jumps[k])} jumps (< 50)" for k in range(n) if out_jumps[k] < 50]
    return {
        "states": S,
        "jump_counts": counts.tolist(),
        "holding_time_total": hold_total.tolist(),
        "rates": rates.tolist(),
        "rates_ci95_low": lo.tolist(),
        "rates_ci95_high": hi.tolist(),
        "holding_cv": cv,
        "holding_cv_pooled": cv_all,
        "delta_fraction": delta_steps / total_steps if total_steps else math.nan,
        "vstar_fraction_by_state": (hold_total / hold_total.sum()).tolist() if hold_total.sum() > 0 else None,
        "aborted": sum(log.status == "aborted" for log in logs),
        "flags": flags,
    }


# ----------------------------------------------------------------------------
# time change


def occupation_clock(intervals, t: float) -> float:
    """T(t): time spent in the union of half-open ``intervals`` up to ``t``."""
    return float(sum(max(0.0, min(b, t) - a) for a, b in intervals if a < t))


def generalized_inverse(intervals, u: float, horizon: float) -> float:
    """S(u) = sup{s <= horizon : T(s) <= u}."""
    if u < 0:
        raise ValueError("u must be non-negative")
    acc = 0.0
    for a, b in sorted(intervals):
        a, b = max(a, 0.0), min(b, horizon)
        if b <= a:
            continue
        if acc + (b - a) > u:
            return a + (u - acc)
        acc += b - a
    return horizon


def intervals_from_visits(visits: np.ndarray, dt: float) -> list[tuple[float, float]]:
    """V_star occupation intervals in natural time from a visits array."""
    return [(s0 * dt, s1 * dt) for lab, s0, s1 in visits if lab >= 0]
