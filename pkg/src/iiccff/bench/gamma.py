"""Gamma prototype: ``Y_j ~ Gamma(a_j, rate theta)`` with known shapes.

The fused log-likelihood is ``a. log theta - theta y.`` (``a. = sum a_j``,
``y. = sum y_j``); its natural CD ``C*(theta) = G(theta y., a.)`` is optimal.
Competitors: the normal-score combination of the per-source CDs and the
confidence-density product, which is proportional to
``theta^(a. - k) exp(-theta y.)``, i.e. a ``Gamma(a. - k + 1, rate y.)`` law.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .. import numerics as nm
from ..curves import ConfidenceCurve, ConfidenceDistribution, ParamGrid, _as_grid
from ..errors import InputError

__all__ = [
    "gamma_cd",
    "gamma_fused_cd",
    "gamma_sxs_cd",
    "gamma_deviance",
    "gamma_exact_cc",
    "deviance_cdf_exact",
    "gamma_density_estimator",
    "confidence_risk",
    "risk_constant",
    "simulate_gamma",
]


def _check(a, y):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if a.shape != y.shape:
        raise InputError("need one shape per observation")
    if np.any(a <= 0) or np.any(y <= 0):
        raise InputError("shapes and observations must be positive")
    return a, y


def _theta_grid(a, y, n=512):
    th = a.sum() / y.sum()
    return ParamGrid(np.geomspace(th * 1e-2, th * 5.0, n))


def gamma_cd(a: float, y: float, grid=None) -> ConfidenceDistribution:
    """``C(theta) = G(theta y, a)``: probability that a new ``Y`` is at most ``y``."""
    a_, y_ = _check(a, y)
    g = _theta_grid(a_, y_) if grid is None else _as_grid(grid)

    def func(theta, _a=float(a_[0]), _y=float(y_[0])):
        return special.gammainc(_a, np.asarray(theta, dtype=float) * _y)

    return ConfidenceDistribution(g, func(g.values), func=func)


def gamma_fused_cd(a: Sequence[float], y: Sequence[float], grid=None) -> ConfidenceDistribution:
    """Optimal combined CD ``G(theta y., a.)``."""
    a_, y_ = _check(a, y)
    return gamma_cd(a_.sum(), y_.sum(), grid)


def gamma_sxs_cd(a: Sequence[float], y: Sequence[float], grid=None, weights=None) -> ConfidenceDistribution:
    """Normal-score combination ``Phi(sum w_j Phi^{-1}(C_j))``, default ``w_j = (a_j/a.)^(1/2)``."""
    a_, y_ = _check(a, y)
    w = np.sqrt(a_ / a_.sum()) if weights is None else np.asarray(weights, dtype=float)
    g = _theta_grid(a_, y_) if grid is None else _as_grid(grid)

    def func(theta):
        theta = np.asarray(theta, dtype=float)
        c = special.gammainc(a_, theta[..., None] * y_)
        return nm.norm_cdf(np.sum(w * special.ndtri(c), axis=-1))

    return ConfidenceDistribution(g, func(g.values), func=func)


def gamma_deviance(theta, a_dot: float, y_dot: float):
    """``2 a. (V - 1 - log V)`` with ``V = theta / theta_hat``."""
    v = np.asarray(theta, dtype=float) * y_dot / a_dot
    return 2.0 * a_dot * (v - 1.0 - np.log(v))


def deviance_cdf_exact(x, a_dot: float):
    """Exact c.d.f. of ``D = 2 a. (V - 1 - log V)`` with ``V ~ Gamma(a.)/a.``.

    ``D <= x`` iff ``V`` lies between the two roots of ``v - 1 - log v = x/(2 a.)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape)
    for i, xi in enumerate(x):
        if xi <= 0:
            continue
        c = xi / (2.0 * a_dot)

        def f(v):
            return v - 1.0 - math.log(v) - c

        lo = nm.find_root(f, (math.exp(-c - 1.0) * 0.5, 1.0))
        hi_b = 2.0 + 2.0 * c
        while f(hi_b) < 0:
            hi_b *= 2.0
        hi = nm.find_root(f, (1.0, hi_b))
        out[i] = special.gammainc(a_dot, a_dot * hi) - special.gammainc(a_dot, a_dot * lo)
    return out if out.size > 1 else float(out[0])


def gamma_exact_cc(a: Sequence[float], y: Sequence[float], grid=None, sims: int = 100_000,
                   rng: nm.RngStream | None = None) -> ConfidenceCurve:
    """``cc(theta) = H(D_fus(theta), a.)`` with ``H`` simulated from ``V ~ Gamma(a.)/a.``."""
    if sims < 1000:
        raise InputError("need at least 1000 simulations")
    a_, y_ = _check(a, y)
    a_dot, y_dot = float(a_.sum()), float(y_.sum())
    g = _theta_grid(a_, y_) if grid is None else _as_grid(grid)
    rng = rng or nm.RngStream(0)
    v = rng.generator(0).gamma(a_dot, size=sims) / a_dot
    dsim = np.sort(2.0 * a_dot * (v - 1.0 - np.log(v)))
    d = gamma_deviance(g.values, a_dot, y_dot)
    cc = np.searchsorted(dsim, d, side="right") / sims
    return ConfidenceCurve(g, cc)


def gamma_density_estimator(a: Sequence[float], y: Sequence[float]) -> float:
    """``(a. - k) / y.``, the mode of the confidence-density product.

    A :class:`RuntimeWarning` is issued when ``a. <= k`` (non-positive value).
    """
    a_, y_ = _check(a, y)
    val = (a_.sum() - a_.size) / y_.sum()
    if val <= 0:
        warnings.warn("confidence-density estimate is not positive (a. <= k)", RuntimeWarning, stacklevel=2)
    return float(val)


def simulate_gamma(a, theta: float, gen: np.random.Generator, size=None):
    a = np.asarray(a, dtype=float)
    shape = a.shape if size is None else (size,) + a.shape
    return gen.gamma(np.broadcast_to(a, shape)) / theta


def _invert_cd(cdf_batch: Callable, u, lo, hi, iters: int = 80):
    """Solve ``cdf(theta) = u`` elementwise by bisection on ``log theta``."""
    llo, lhi = np.log(lo), np.log(hi)
    for _ in range(iters):
        mid = 0.5 * (llo + lhi)
        below = cdf_batch(np.exp(mid)) < u
        llo = np.where(below, mid, llo)
        lhi = np.where(below, lhi, mid)
    return np.exp(0.5 * (llo + lhi))


def _draw(method, a, y, gen):
    """One draw ``theta_cd`` per dataset (rows of ``y``)."""
    a_dot = a.sum()
    y_dot = y.sum(axis=-1)
    n = y.shape[0]
    if callable(method):
        return np.asarray(method(a, y, gen), dtype=float)
    if method == "optimal":
        return gen.gamma(a_dot, size=n) / y_dot
    if method == "density":
        shape = a_dot - a.size + 1.0
        if shape <= 0:
            raise InputError("confidence-density law is improper (a. - k + 1 <= 0)")
        return gen.gamma(shape, size=n) / y_dot
    if method == "sxs":
        w = np.sqrt(a / a_dot)
        u = gen.random(n)

        def cdf(theta):
            c = special.gammainc(a, theta[:, None] * y)
            return nm.norm_cdf(np.sum(w * special.ndtri(c), axis=-1))

        th = a_dot / y_dot
        return _invert_cd(cdf, u, th * 1e-6, th * 1e6)
    raise InputError(f"unknown CD method {method!r}")


def confidence_risk(method, a: Sequence[float], theta: float, sims: int = 20_000,
                    rng: nm.RngStream | None = None, batch: int = 5000):
    """Monte-Carlo risk ``E |theta_cd - theta|`` by two-stage sampling.

    Data are drawn from the model, then one ``theta_cd`` from the resulting
    CD.  ``method`` is ``"optimal"``, ``"sxs"``, ``"density"`` or a callable
    ``(a, y, gen) -> draws``.  Returns ``(risk, standard_error)``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    rng = rng or nm.RngStream(0)
    losses = []
    for b, start in enumerate(range(0, sims, batch)):
        n = min(batch, sims - start)
        gen = rng.generator(b)
        y = simulate_gamma(a, theta, gen, n)
        losses.append(np.abs(_draw(method, a, y, gen) - theta))
    loss = np.concatenate(losses)
    return float(loss.mean()), float(loss.std(ddof=1) / math.sqrt(loss.size))


def risk_constant(a_dot: float, sims: int = 200_000, rng: nm.RngStream | None = None):
    """``r0 = E |G1/G2 - 1|`` for independent ``Gamma(a.)`` draws; returns ``(r0, se)``."""
    gen = (rng or nm.RngStream(0)).generator(0)
    g1 = gen.gamma(a_dot, size=sims)
    g2 = gen.gamma(a_dot, size=sims)
    d = np.abs(g1 / g2 - 1.0)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(sims))
