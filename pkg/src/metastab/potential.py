"""Polynomial potentials U, skew-driven vector fields ell = J(U) grad U, and
their exact derivatives.

A configuration document is a YAML key-value tree::

    dimension: 2
    potential:
      terms:
        - {coeff: 1.0, powers: [4, 0]}
        - {coeff: -2.0, powers: [2, 0]}
        - {coeff: 1.0, powers: [0, 0]}
        - {coeff: 1.0, powers: [0, 2]}
    ell:
      kind: skew_poly          # or: zero
      J:                       # J(a) = J[0] + J[1] a + J[2] a^2 + ...
        - [[0.0, 1.0], [-1.0, 0.0]]
    domain: {lower: [-2, -2], upper: [2, 2]}
    level_H: 1.0
    epsilons: [0.15, 0.12, 0.1]
    r0: 0.55
    seed: 7
"""

from __future__ import annotations

import hashlib
import itertools
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import yaml

from .errors import SpecParseError

ELL_KINDS = ("zero", "skew_poly")
_KEYS = {"dimension", "potential", "ell", "domain", "level_H", "epsilons", "r0", "seed"}


@dataclass(frozen=True)
class Term:
    coeff: float
    powers: tuple[int, ...]


@dataclass(frozen=True)
class PotentialSpec:
    dimension: int
    terms: tuple[Term, ...]
    ell_kind: str = "zero"
    J_coeffs: tuple[tuple[tuple[float, ...], ...], ...] = ()
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()
    level_H: float = 0.0
    epsilons: tuple[float, ...] = ()
    r0: float = 0.1
    seed: int = 0

    def field_eval(self) -> "FieldEval":
        return FieldEval.from_spec(self)

    @property
    def J_arrays(self) -> np.ndarray:
        if self.ell_kind == "zero" or not self.J_coeffs:
            return np.zeros((0, self.dimension, self.dimension))
        return np.array(self.J_coeffs, dtype=float)


# ----------------------------------------------------------------------------
# parsing


def _line_index(node, path=(), out=None):
    """Map key paths of a composed YAML node tree to 1-based line numbers."""
    if out is None:
        out = {}
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            _line_index(value_node, path + (key_node.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, path + (i,), out)
    return out


class _Ctx:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, message, path):
        name = ".".join(str(p) for p in path) if path else None
        line = None
        for k in range(len(path), -1, -1):
            if tuple(path[:k]) in self.lines:
                line = self.lines[tuple(path[:k])]
                break
        raise SpecParseError(message, field=name, line=line)

    def real(self, value, path):
        # floats go through float(str) so decimal text is rounded exactly once
        if isinstance(value, bool):
            self.fail("expected a real number, got a boolean", path)
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value.strip())
            except ValueError:
                pass
        self.fail(f"expected a real number, got {value!r}", path)

    def integer(self, value, path):
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(f"expected an integer, got {value!r}", path)
        return value

    def seq(self, value, path):
        if not isinstance(value, list):
            self.fail(f"expected a list, got {type(value).__name__}", path)
        return value

    def mapping(self, value, path):
        if not isinstance(value, dict):
            self.fail(f"expected a mapping, got {type(value).__name__}", path)
        return value


def parse_spec(text: str) -> PotentialSpec:
    """Parse and validate a configuration document."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise SpecParseError(f"malformed document: {exc.problem}", line=line) from exc
    except yaml.YAMLError as exc:
        raise SpecParseError(f"malformed document: {exc}") from exc
    if root is None or not isinstance(data, dict):
        raise SpecParseError("document must be a mapping at the top level", line=1)
    ctx = _Ctx(_line_index(root))

    unknown = sorted(set(map(str, data)) - _KEYS)
    if unknown:
        ctx.fail(f"unknown key '{unknown[0]}'", (unknown[0],))
    for key in ("dimension", "potential", "domain", "level_H", "r0"):
        if key not in data:
            ctx.fail("missing required key", (key,))

    d = ctx.integer(data["dimension"], ("dimension",))
    if d < 1:
        ctx.fail("dimension must be >= 1", ("dimension",))

    pot = ctx.mapping(data["potential"], ("potential",))
    raw_terms = ctx.seq(pot.get("terms"), ("potential", "terms"))
    if not raw_terms:
        ctx.fail("at least one term is required", ("potential", "terms"))
    terms = []
    for k, t in enumerate(raw_terms):
        path = ("potential", "terms", k)
        t = ctx.mapping(t, path)
        if "coeff" not in t or "powers" not in t:
            ctx.fail("term needs 'coeff' and 'powers'", path)
        coeff = ctx.real(t["coeff"], path + ("coeff",))
        powers = ctx.seq(t["powers"], path + ("powers",))
        if len(powers) != d:
            ctx.fail(f"exponent vector has length {len(powers)}, expected {d}", path + ("powers",))
        pw = tuple(ctx.integer(p, path + ("powers", i)) for i, p in enumerate(powers))
        if any(p < 0 for p in pw):
            ctx.fail("exponents must be non-negative", path + ("powers",))
        terms.append(Term(coeff, pw))

    ell = ctx.mapping(data.get("ell", {"kind": "zero"}), ("ell",))
    kind = ell.get("kind", "zero")
    if kind not in ELL_KINDS:
        ctx.fail(f"ell.kind must be one of {ELL_KINDS}, got {kind!r}", ("ell", "kind"))
    J_coeffs = ()
    if kind == "skew_poly":
        mats = ctx.seq(ell.get("J"), ("ell", "J"))
        if not mats:
            ctx.fail("skew_poly needs at least one matrix", ("ell", "J"))
        parsed = []
        for k, m in enumerate(mats):
            path = ("ell", "J", k)
            rows = ctx.seq(m, path)
            if len(rows) != d:
                ctx.fail(f"matrix J_{k} must have {d} rows", path)
            mat = []
            for r, row in enumerate(rows):
                row = ctx.seq(row, path + (r,))
                if len(row) != d:
                    ctx.fail(f"matrix J_{k} row {r + 1} must have {d} entries", path + (r,))
                mat.append(tuple(ctx.real(v, path + (r, c)) for c, v in enumerate(row)))
            for i in range(d):
                for j in range(i + 1):
                    if mat[i][j] + mat[j][i] != 0.0:
                        ctx.fail(
                            f"matrix J_{k} not skew-symmetric at ({i + 1},{j + 1})", path + (i, j)
                        )
            parsed.append(tuple(mat))
        J_coeffs = tuple(parsed)

    dom = ctx.mapping(data["domain"], ("domain",))
    lower = tuple(ctx.real(v, ("domain", "lower", i)) for i, v in enumerate(ctx.seq(dom.get("lower"), ("domain", "lower"))))
    upper = tuple(ctx.real(v, ("domain", "upper", i)) for i, v in enumerate(ctx.seq(dom.get("upper"), ("domain", "upper"))))
    if len(lower) != d or len(upper) != d:
        ctx.fail(f"domain bounds must have {d} entries", ("domain",))
    if any(lo >= hi for lo, hi in zip(lower, upper)):
        ctx.fail("domain.lower must be strictly below domain.upper", ("domain",))

    level_H = ctx.real(data["level_H"], ("level_H",))
    eps = tuple(ctx.real(v, ("epsilons", i)) for i, v in enumerate(ctx.seq(data.get("epsilons", []), ("epsilons",))))
    if any(e <= 0 for e in eps):
        ctx.fail("epsilons must be positive", ("epsilons",))
    r0 = ctx.real(data["r0"], ("r0",))
    if r0 <= 0:
        ctx.fail("r0 must be positive", ("r0",))
    seed = ctx.integer(data.get("seed", 0), ("seed",))
    if not 0 <= seed < 2**64:
        ctx.fail("seed must be an unsigned 64-bit integer", ("seed",))

    return PotentialSpec(
        dimension=d,
        terms=tuple(terms),
        ell_kind=kind,
        J_coeffs=J_coeffs,
        lower=lower,
        upper=upper,
        level_H=level_H,
        epsilons=eps,
        r0=r0,
        seed=seed,
    )


def load_spec(path) -> PotentialSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec(fh.read())


def serialize_spec(spec: PotentialSpec) -> str:
    """Inverse of :func:`parse_spec`; floats are written with ``repr`` so they round-trip."""
    doc = {
        "dimension": spec.dimension,
        "potential": {
            "terms": [{"coeff": repr(t.coeff), "powers": list(t.powers)} for t in spec.terms]
        },
        "ell": {"kind": spec.ell_kind},
        "domain": {
            "lower": [repr(v) for v in spec.lower],
            "upper": [repr(v) for v in spec.upper],
        },
        "level_H": repr(spec.level_H),
        "epsilons": [repr(e) for e in spec.epsilons],
        "r0": repr(spec.r0),
        "seed": spec.seed,
    }
    if spec.ell_kind == "skew_poly":
        doc["ell"]["J"] = [[[repr(v) for v in row] for row in m] for m in spec.J_coeffs]
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=None)


# ----------------------------------------------------------------------------
# evaluation


def _poly_derivative(coeffs, powers, k):
    mask = powers[:, k] > 0
    c = coeffs[mask] * powers[mask, k]
    p = powers[mask].copy()
    p[:, k] -= 1
    return c, p


def _poly_eval(coeffs, powers, x):
    # x: (n, d) -> (n,)
    if coeffs.size == 0:
        return np.zeros(x.shape[0])
    mon = np.prod(x[:, None, :] ** powers[None, :, :], axis=2)
    return mon @ coeffs


@dataclass(frozen=True, eq=False)
class FieldEval:
    """Immutable evaluator for U, its derivatives, ell and D ell.

    All methods accept a single point of shape ``(d,)`` or a batch ``(n, d)``.
    """

    coeffs: np.ndarray
    powers: np.ndarray
    J: np.ndarray  # (p+1, d, d); empty first axis means ell == 0
    spec: PotentialSpec | None = field(default=None, repr=False)

    @classmethod
    def from_spec(cls, spec: PotentialSpec) -> "FieldEval":
        coeffs = np.array([t.coeff for t in spec.terms], dtype=float)
        powers = np.array([t.powers for t in spec.terms], dtype=np.int64).reshape(-1, spec.dimension)
        return cls(coeffs, powers, spec.J_arrays, spec)

    @property
    def dim(self) -> int:
        return self.powers.shape[1]

    @property
    def has_ell(self) -> bool:
        return self.J.shape[0] > 0

    @cached_property
    def _grad_polys(self):
        return [_poly_derivative(self.coeffs, self.powers, k) for k in range(self.dim)]

    @cached_property
    def _hess_polys(self):
        out = {}
        for k, (c, p) in enumerate(self._grad_polys):
            for m in range(k, self.dim):
                out[k, m] = _poly_derivative(c, p, m)
        return out

    @cached_property
    def _dJ(self):
        if self.J.shape[0] <= 1:
            return np.zeros((0, self.dim, self.dim))
        k = np.arange(1, self.J.shape[0], dtype=float)
        return self.J[1:] * k[:, None, None]

    @staticmethod
    def _batch(x):
        x = np.asarray(x, dtype=float)
        return x.reshape(-1, x.shape[-1]), x.ndim == 1

    def U(self, x):
        xb, single = self._batch(x)
        val = _poly_eval(self.coeffs, self.powers, xb)
        return val[0] if single else val

    def grad(self, x):
        xb, single = self._batch(x)
        g = np.stack([_poly_eval(c, p, xb) for c, p in self._grad_polys], axis=1)
        return g[0] if single else g

    def hess(self, x):
        xb, single = self._batch(x)
        n, d = xb.shape
        h = np.empty((n, d, d))
        for (k, m), (c, p) in self._hess_polys.items():
            h[:, k, m] = _poly_eval(c, p, xb)
            h[:, m, k] = h[:, k, m]
        return h[0] if single else h

    @staticmethod
    def _matpoly(mats, a):
        # sum_k mats[k] a^k for a batch of scalars a: (n,) -> (n, d, d)
        out = np.zeros((a.shape[0],) + mats.shape[1:])
        for k in range(mats.shape[0] - 1, -1, -1):
            out = out * a[:, None, None] + mats[k]
        return out

    def J_of(self, a):
        """Skew matrix J(a) for a batch of levels ``a``."""
        return self._matpoly(self.J, np.atleast_1d(np.asarray(a, dtype=float)))

    def ell(self, x):
        xb, single = self._batch(x)
        if not self.has_ell:
            v = np.zeros_like(xb)
        else:
            Jx = self._matpoly(self.J, _poly_eval(self.coeffs, self.powers, xb))
            v = np.einsum("nij,nj->ni", Jx, self.grad(xb))
        return v[0] if single else v

    def jac_ell(self, x):
        xb, single = self._batch(x)
        n, d = xb.shape
        if not self.has_ell:
            out = np.zeros((n, d, d))
        else:
            u = _poly_eval(self.coeffs, self.powers, xb)
            g = self.grad(xb)
            out = np.einsum("nij,njk->nik", self._matpoly(self.J, u), self.hess(xb))
            if self._dJ.shape[0]:
                dJg = np.einsum("nij,nj->ni", self._matpoly(self._dJ, u), g)
                out = out + dJg[:, :, None] * g[:, None, :]
        return out[0] if single else out

    def drift(self, x):
        """Deterministic drift -(grad U + ell)."""
        return -(self.grad(x) + self.ell(x))


# ----------------------------------------------------------------------------
# checks


def halton(n: int, d: int, lower, upper) -> np.ndarray:
    """First ``n`` points of the Halton sequence scaled into the box."""
    primes = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29][:d]
    pts = np.empty((n, d))
    for j, b in enumerate(primes):
        for i in range(n):
            f, r, k = 1.0, 0.0, i + 1
            while k > 0:
                f /= b
                r += f * (k % b)
                k //= b
            pts[i, j] = r
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    return lo + pts * (hi - lo)


def check_structure(ev: FieldEval, sample_points=None, tol: float = 1e-10) -> dict:
    """Orthogonality grad U . ell = 0 and incompressibility div ell = 0 on samples."""
    if sample_points is None:
        sample_points = halton(1024, ev.dim, ev.spec.lower, ev.spec.upper)
    x = np.atleast_2d(np.asarray(sample_points, dtype=float))
    ortho = np.abs(np.einsum("ni,ni->n", ev.grad(x), ev.ell(x)))
    div = np.abs(np.trace(ev.jac_ell(x), axis1=1, axis2=2))
    report = {
        "n_points": int(x.shape[0]),
        "max_orthogonality": float(ortho.max()),
        "max_divergence": float(div.max()),
        "tol": tol,
        "growth_conditions": "assumed",
    }
    report["passed"] = report["max_orthogonality"] <= tol and report["max_divergence"] <= tol
    return report


def _rel_err(approx, exact):
    scale = max(1.0, float(np.max(np.abs(exact))))
    return float(np.max(np.abs(approx - exact))) / scale


def derivative_selfcheck(ev: FieldEval, x, h: float | None = None, rtol: float = 1e-6) -> dict:
    """Compare analytic gradU, hessU, jacEll with central finite differences.

    The default step is ``1e-5 * (1 + |x|)``.  Errors are reported relative to
    ``max(1, |exact|_inf)`` so that vanishing derivatives do not blow up.
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-5 * (1.0 + float(np.linalg.norm(x)))
    if h <= 0:
        raise ValueError("h must be positive")
    d = x.size
    steps = np.eye(d) * h
    fd_grad = np.array([(ev.U(x + s) - ev.U(x - s)) / (2 * h) for s in steps])
    fd_hess = np.stack([(ev.grad(x + s) - ev.grad(x - s)) / (2 * h) for s in steps], axis=1)
    fd_jac = np.stack([(ev.ell(x + s) - ev.ell(x - s)) / (2 * h) for s in steps], axis=1)
    # second differences of U directly, as an independent Hessian route
    fd_hess_u = np.empty((d, d))
    for i, j in itertools.product(range(d), repeat=2):
        si, sj = steps[i], steps[j]
        fd_hess_u[i, j] = (
            ev.U(x + si + sj) - ev.U(x + si - sj) - ev.U(x - si + sj) + ev.U(x - si - sj)
        ) / (4 * h * h)
    errs = {
        "grad": _rel_err(fd_grad, ev.grad(x)),
        "hess": _rel_err(fd_hess, ev.hess(x)),
        "hess_from_U": _rel_err(fd_hess_u, ev.hess(x)),
        "jac_ell": _rel_err(fd_jac, ev.jac_ell(x)),
    }
    return {
        "point": x.tolist(),
        "h": h,
        "errors": errs,
        "max_error": max(errs["grad"], errs["hess"], errs["jac_ell"]),
        "passed": max(errs["grad"], errs["hess"], errs["jac_ell"]) < rtol,
    }


def corner_growth_warnings(ev: FieldEval) -> list[str]:
    """Warn when U decreases along the ray from the box centre to a corner."""
    spec = ev.spec
    lo, hi = np.asarray(spec.lower), np.asarray(spec.upper)
    centre = 0.5 * (lo + hi)
    msgs = []
    for corner in itertools.product(*zip(lo, hi)):
        c = np.asarray(corner)
        inner = centre + 0.9 * (c - centre)
        if ev.U(c) <= ev.U(inner):
            msg = f"U does not increase toward corner {tuple(float(v) for v in c)}"
            msgs.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return msgs


def spec_hash(spec: PotentialSpec) -> str:
    return hashlib.sha256(serialize_spec(spec).encode("utf-8")).hexdigest()

