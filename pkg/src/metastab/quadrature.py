"""Composite Gauss-Legendre quadrature on boxes and balls (d <= 3)."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import NumericError

_ORDER = 8


def _gl(order=_ORDER):
    return np.polynomial.legendre.leggauss(order)


def panel_rule(a: float, b: float, panels: int, order: int = _ORDER):
    """Composite Gauss-Legendre nodes and weights on [a, b]."""
    t, w = _gl(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def tensor_rule(lower, upper, panels, order: int = _ORDER):
    """Tensor grid of composite rules; returns points (n, d) and weights (n,)."""
    if np.isscalar(panels):
        panels = [int(panels)] * len(lower)
    rules = [panel_rule(a, b, p, order) for a, b, p in zip(lower, upper, panels)]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return pts, wts


def _chunked_sum(f, pts, wts, chunk=200_000):
    total = 0.0
    for start in range(0, pts.shape[0], chunk):
        sl = slice(start, start + chunk)
        total += float(np.dot(f(pts[sl]), wts[sl]))
    return total


def integrate_box(f, lower, upper, panels=16, rtol=1e-8, max_panels=1024, order=_ORDER):
    """Integrate a vectorised ``f(points) -> values`` over a box by panel doubling.

    Stops when two successive refinements agree to ``rtol``.  Raises
    :class:`NumericError` carrying the refinement trace otherwise.
    """
    trace = []
    prev = None
    p = panels
    while p <= max_panels:
        pts, wts = tensor_rule(lower, upper, p, order)
        val = _chunked_sum(f, pts, wts)
        trace.append((p, val))
        if prev is not None and abs(val - prev) <= rtol * max(abs(val), 1e-300):
            return val, trace
        prev = val
        p *= 2
    raise NumericError("box quadrature did not converge", trace)


def ball_rule(center, radius, n_radial, n_angular, order: int = _ORDER):
    """Quadrature on the closed ball of given radius in d = 1, 2, 3."""
    center = np.asarray(center, dtype=float)
    d = center.size
    r, wr = panel_rule(0.0, radius, n_radial, order)
    if d == 1:
        pts = np.concatenate([center - r[:, None], center + r[:, None]])
        return pts, np.concatenate([wr, wr])
    if d == 2:
        phi, wphi = panel_rule(0.0, 2 * math.pi, n_angular, order)
        R, P = np.meshgrid(r, phi, indexing="ij")
        W = np.outer(wr * r, wphi)
        pts = center + np.stack([(R * np.cos(P)).ravel(), (R * np.sin(P)).ravel()], axis=1)
        return pts, W.ravel()
    if d == 3:
        phi, wphi = panel_rule(0.0, 2 * math.pi, n_angular, order)
        th, wth = panel_rule(0.0, math.pi, max(1, n_angular // 2), order)
        R, T, P = np.meshgrid(r, th, phi, indexing="ij")
        W = (wr * r**2)[:, None, None] * (wth * np.sin(th))[None, :, None] * wphi[None, None, :]
        xyz = np.stack(
            [
                (R * np.sin(T) * np.cos(P)).ravel(),
                (R * np.sin(T) * np.sin(P)).ravel(),
                (R * np.cos(T)).ravel(),
            ],
            axis=1,
        )
        return center + xyz, W.ravel()
    raise ValueError("ball quadrature supports d <= 3 only")


def integrate_ball(f, center, radius, n_radial=8, n_angular=8, rtol=1e-8, max_level=6):
    trace = []
    prev = None
    for level in range(max_level):
        nr, na = n_radial * 2**level, n_angular * 2**level
        pts, wts = ball_rule(center, radius, nr, na)
        val = _chunked_sum(f, pts, wts)
        trace.append(((nr, na), val))
        if prev is not None and abs(val - prev) <= rtol * max(abs(val), 1e-300):
            return val, trace
        prev = val
    raise NumericError("ball quadrature did not converge", trace)


def box_corners(lower, upper):
    return np.array(list(itertools.product(*zip(lower, upper))), dtype=float)
