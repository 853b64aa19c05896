"""Deterministic numerical substrate.

Distribution functions, root finding, scalar and simplex minimisation,
Gauss-Hermite and Laplace integration, and a counter-based random stream
descriptor.  Special functions delegate to ``scipy.special`` (Cephes).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import (
    BracketError,
    FlatModeError,
    InputError,
    NonFiniteError,
    NumericalError,
)

__all__ = [
    "Interval",
    "RngStream",
    "norm_cdf",
    "norm_pdf",
    "norm_quantile",
    "chi2_cdf",
    "chi2_quantile",
    "gamma_cdf",
    "beta_cdf",
    "t_cdf",
    "t_quantile",
    "find_root",
    "minimize_scalar",
    "golden_section_batch",
    "minimize_multivariate",
    "gauss_hermite_rule",
    "integrate_gauss_hermite",
    "adaptive_log_integral",
    "laplace_log_integral",
    "logsumexp",
]

SCALAR_TOL = 1e-8
SIMPLEX_TOL = 1e-6
MAX_ITER = 2000
GH_NODES = 30


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    half_open: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InputError(f"interval needs lo < hi, got [{self.lo}, {self.hi}]")
        if not self.half_open and not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise InputError("interval endpoints must be finite unless half_open=True")

    @classmethod
    def of(cls, bracket) -> "Interval":
        if isinstance(bracket, Interval):
            return bracket
        lo, hi = bracket
        return cls(float(lo), float(hi))

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class RngStream:
    """Immutable descriptor of a reproducible random stream.

    Generators are Philox (counter based) keyed through ``SeedSequence`` with
    ``spawn_key=(stream_id, *sub)``, so the same ``(seed, stream_id, sub)``
    gives the same numbers regardless of call order or thread layout.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) < 2**64):
                raise InputError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self, *sub: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), *map(int, sub)))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)


# ---------------------------------------------------------------- distributions


def norm_cdf(x):
    return special.ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def norm_quantile(p, *, strict: bool = True):
    """Inverse of :func:`norm_cdf`.

    With ``strict`` (the default) probabilities of exactly 0 or 1 raise, since
    the quantile is unbounded there; ``strict=False`` returns -inf/+inf.
    """
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise InputError("probability outside [0, 1]")
    if strict and np.any((p == 0) | (p == 1)):
        raise NumericalError("normal quantile is unbounded at p in {0, 1}")
    out = special.ndtri(p)
    return out if out.ndim else float(out)


def _check_df(df):
    if np.any(np.asarray(df) <= 0):
        raise InputError(f"degrees of freedom must be positive, got {df}")


def chi2_cdf(x, df):
    _check_df(df)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InputError("chi-squared c.d.f. needs x >= 0")
    out = special.chdtr(df, x)
    return out if out.ndim else float(out)


def chi2_quantile(p, df):
    _check_df(df)
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise InputError("probability outside [0, 1]")
    out = special.chdtri(df, 1.0 - p)
    # chdtri works on the upper tail; at p == 0 it is exact zero
    out = np.where(p == 0, 0.0, out)
    return out if out.ndim else float(out)


def gamma_cdf(x, shape, scale=1.0):
    """Regularised lower incomplete gamma P(shape, x/scale)."""
    if np.any(np.asarray(shape) <= 0):
        raise InputError("gamma shape must be positive")
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    out = special.gammainc(shape, x / scale)
    return out if np.ndim(out) else float(out)


def beta_cdf(x, a, b):
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise InputError("beta parameters must be positive")
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > 1)):
        raise InputError("beta c.d.f. needs 0 <= x <= 1")
    out = special.betainc(a, b, x)
    return out if out.ndim else float(out)


def t_cdf(x, df):
    _check_df(df)
    out = special.stdtr(df, np.asarray(x, dtype=float))
    return out if np.ndim(out) else float(out)


def t_quantile(p, df):
    _check_df(df)
    out = special.stdtrit(df, np.asarray(p, dtype=float))
    return out if np.ndim(out) else float(out)


def logsumexp(a, axis=None, keepdims: bool = False):
    """``log sum exp(a)`` stabilised by the maximum; all ``-inf`` gives ``-inf``."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out if out.ndim else float(out)


# ------------------------------------------------------------- root / minimum


def find_root(f, bracket, tol: float = 1e-12, maxiter: int = MAX_ITER) -> float:
    """Brent root of ``f`` inside ``bracket``; raises BracketError without a sign change."""
    iv = Interval.of(bracket)
    flo, fhi = f(iv.lo), f(iv.hi)
    if not (np.isfinite(flo) and np.isfinite(fhi)):
        raise NonFiniteError("non-finite function value at bracket end", (iv.lo, iv.hi))
    if flo == 0:
        return iv.lo
    if fhi == 0:
        return iv.hi
    if flo * fhi > 0:
        raise BracketError(f"no sign change on [{iv.lo}, {iv.hi}]: f={flo:.3g}, {fhi:.3g}")
    return optimize.brentq(f, iv.lo, iv.hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=maxiter)


def _guard(f):
    def g(x):
        v = f(x)
        if not np.isfinite(v):
            raise NonFiniteError(f"objective is non-finite at {x!r}", x)
        return v

    return g


def minimize_scalar(f, bracket, tol: float = SCALAR_TOL, maxiter: int = MAX_ITER):
    """Bounded Brent minimisation (golden section + parabolic steps).

    Both bracket ends are also evaluated, so minima on the boundary (e.g. a
    spread parameter at zero) are returned exactly.  Returns ``(argmin, min)``.
    """
    iv = Interval.of(bracket)
    g = _guard(f)
    res = optimize.minimize_scalar(
        g, bounds=(iv.lo, iv.hi), method="bounded", options={"xatol": tol, "maxiter": maxiter}
    )
    best_x, best_f = float(res.x), float(res.fun)
    for x in (iv.lo, iv.hi):
        v = g(x)
        if v < best_f:
            best_x, best_f = x, float(v)
    return best_x, best_f


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_batch(f, lo, hi, tol: float = SCALAR_TOL, maxiter: int = 200):
    """Vectorised golden-section search for many independent 1-D problems.

    ``f`` maps an array of trial points (one per problem) to objective values.
    Endpoints are compared at the end so boundary minima survive.
    """
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if np.all(b - a <= tol):
            break
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _INVPHI * (b - a)
        new_d = a + _INVPHI * (b - a)
        # reuse one interior point per problem
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        fc_old, fd_old = fc, fd
        probe = np.where(left, new_c, new_d)
        fp = f(probe)
        fc = np.where(left, fp, fd_old)
        fd = np.where(left, fc_old, fp)
        c, d = c_next, d_next
    x = np.where(fc < fd, c, d)
    fx = np.minimum(fc, fd)
    for end in (np.array(lo, dtype=float), np.array(hi, dtype=float)):
        fe = f(end)
        better = fe < fx
        x = np.where(better, end, x)
        fx = np.where(better, fe, fx)
    return x, fx


def minimize_multivariate(f, start, tol: float = SIMPLEX_TOL, maxiter: int = MAX_ITER):
    """Nelder-Mead simplex minimisation; returns ``(argmin, min)``."""
    x0 = np.atleast_1d(np.asarray(start, dtype=float))
    g = _guard(lambda x: float(f(x)))
    f0 = g(x0)
    res = optimize.minimize(
        g,
        x0,
        method="Nelder-Mead",
        options={"xatol": tol, "fatol": tol * 1e-2, "maxiter": maxiter, "maxfev": 4 * maxiter},
    )
    if res.fun > f0:
        return x0, f0
    return np.asarray(res.x), float(res.fun)


# ----------------------------------------------------------------- integration


@functools.lru_cache(maxsize=32)
def _hermite(nodes: int):
    x, w = np.polynomial.hermite.hermgauss(nodes)
    # absorb exp(x^2) so the rule integrates exp(log_integrand) directly
    lw = np.log(w) + x * x
    x.flags.writeable = False
    lw.flags.writeable = False
    return x, lw


def gauss_hermite_rule(nodes: int = GH_NODES):
    """Nodes and log-weights for ``int g(u) du`` after the u = c + sqrt(2) s x map."""
    if nodes < 1:
        raise InputError("need at least one node")
    return _hermite(int(nodes))


def integrate_gauss_hermite(log_integrand, center: float, scale: float, nodes: int = GH_NODES,
                            check: bool = True) -> float:
    """``log int exp(log_integrand(u)) du`` by Gauss-Hermite about ``center``.

    ``scale`` should match the width of the integrand's mass.  With ``check``
    the rule is compared against one with ``nodes // 2 + 1`` points and a
    disagreement above 1e-6 on the log scale is an error; indicator-like
    (non-smooth) integrands are not supported and land here.
    """
    if not scale > 0:
        raise InputError("scale must be positive")
    x, lw = gauss_hermite_rule(nodes)
    u = center + math.sqrt(2.0) * scale * x
    vals = np.asarray(log_integrand(u), dtype=float)
    bad = np.isnan(vals) | (vals == np.inf)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"log-integrand is {vals[i]} at node u={u[i]:.6g}", u[i])
    out = float(logsumexp(lw + vals)) + math.log(math.sqrt(2.0) * scale)
    if not np.isfinite(out):
        raise NumericalError("integral underflows at every node")
    if check:
        n2 = nodes // 2 + 1
        x2, lw2 = gauss_hermite_rule(n2)
        v2 = np.asarray(log_integrand(center + math.sqrt(2.0) * scale * x2), dtype=float)
        coarse = float(logsumexp(lw2 + v2)) + math.log(math.sqrt(2.0) * scale)
        if abs(coarse - out) > 1e-6:
            raise NumericalError(
                f"Gauss-Hermite rule not converged ({nodes} vs {n2} nodes differ by "
                f"{abs(coarse - out):.2e}); integrand is not smooth enough for this rule"
            )
    return out


def _mode_and_curvature(log_integrand, start: float, width: float = 1.0):
    limit = 1e8 * max(1.0, width)

    def neg(u):
        if not (np.isfinite(u) and abs(u - start) <= limit):
            raise FlatModeError(f"no interior mode found near {start}: search ran off to {u}")
        v = log_integrand(np.array([u]))[0]
        if np.isnan(v) or v == np.inf:
            raise NonFiniteError(f"log-integrand is {v} at u={u}", u)
        return -v

    try:
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.minimize_scalar(neg, bracket=(start - width, start + width), method="brent",
                                           options={"xtol": 1e-10, "maxiter": MAX_ITER})
    except (RuntimeError, ValueError) as exc:
        raise FlatModeError(f"no interior mode found near {start}: {exc}") from exc
    mode = float(res.x)
    if not (np.isfinite(mode) and np.isfinite(res.fun)) or abs(mode - start) > limit:
        raise FlatModeError(f"no interior mode found near {start}")
    h = 1e-4 * (1.0 + abs(mode))
    f0 = -res.fun
    fp, fm = -neg(mode + h), -neg(mode - h)
    curv = (fp - 2.0 * f0 + fm) / (h * h)
    if not curv < 0:
        raise FlatModeError(f"curvature {curv:.3g} at mode {mode:.6g} is not negative")
    return mode, f0, curv


def laplace_log_integral(log_integrand, start: float, width: float = 1.0) -> float:
    """Laplace approximation of ``log int exp(l(u)) du`` about the mode of ``l``."""
    _, f0, curv = _mode_and_curvature(log_integrand, start, width)
    return f0 + 0.5 * math.log(2.0 * math.pi) - 0.5 * math.log(-curv)


def adaptive_log_integral(log_integrand, start: float, nodes: int = GH_NODES, method: str = "gh",
                          width: float = 1.0) -> float:
    """Gauss-Hermite re-centred at the integrand's mode with curvature scale.

    ``method="laplace"`` returns the Laplace approximation instead.
    """
    mode, f0, curv = _mode_and_curvature(log_integrand, start, width)
    if method == "laplace":
        return f0 + 0.5 * math.log(2.0 * math.pi) - 0.5 * math.log(-curv)
    if method != "gh":
        raise InputError(f"unknown integration method {method!r}")
    return integrate_gauss_hermite(log_integrand, mode, 1.0 / math.sqrt(-curv), nodes, check=False)
