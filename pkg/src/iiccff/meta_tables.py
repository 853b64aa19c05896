"""Meta-analysis of 2x2 tables.

Each source is a pair of binomial counts, ``y0 ~ Bin(m0, p0)`` (control)
and ``y1 ~ Bin(m1, p1)`` (treatment).  For the log odds ratio, conditioning
on the margin ``z = y0 + y1`` removes the nuisance parameter and leaves the
eccentric (Fisher non-central) hypergeometric law

    g(y1; psi) = C(m0, z - y1) C(m1, y1) exp(psi y1) / sum_u C(m0, z - u) C(m1, u) exp(psi u),

which gives exact per-source CDs, the optimal common CD (through the sum of
the treatment counts), and exact conversion for fusion.  The module also
provides per-source profiling for odds ratio, risk ratio and risk
difference, a random-effects fusion, and the Mantel-Haenszel baseline.
"""

from __future__ import annotations

import csv
import enum
import functools
import math
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace
from typing import Sequence

import numpy as np
from scipy import special

from . import numerics as nm
from .curves import ConfidenceDistribution, ParamGrid, _as_grid
from .errors import DegenerateDataError, InputError, UndefinedEstimateError
from .fuse import DEFAULT_LEVELS, FusionResult, cox_reid_random, fuse_random, fusion_result

__all__ = [
    "TwoByTwoTable",
    "EffectMeasure",
    "MHResult",
    "nchg_support",
    "nchg_logpmf",
    "nchg_pmf",
    "source_cd_or",
    "optimal_cd_common",
    "conditional_loglik",
    "fused_cc_exact_or",
    "standard_iiccff",
    "random_effects_2x2",
    "mantel_haenszel",
    "default_grid",
    "read_tables",
]


class EffectMeasure(str, enum.Enum):
    OR = "log-odds-ratio"
    RR = "log-risk-ratio"
    RD = "risk-difference"

    @classmethod
    def parse(cls, value) -> "EffectMeasure":
        if isinstance(value, cls):
            return value
        aliases = {"or": cls.OR, "rr": cls.RR, "rd": cls.RD}
        v = str(value).lower()
        if v in aliases:
            return aliases[v]
        try:
            return cls(v)
        except ValueError:
            raise InputError(f"unknown effect measure {value!r}") from None


@dataclass(frozen=True)
class TwoByTwoTable:
    y1: int
    m1: int
    y0: int
    m0: int

    def __post_init__(self):
        for name in ("y1", "m1", "y0", "m0"):
            v = getattr(self, name)
            if int(v) != v:
                raise InputError(f"{name} must be an integer count, got {v}")
            object.__setattr__(self, name, int(v))
        if self.m0 < 1 or self.m1 < 1:
            raise InputError("arm sizes must be at least 1")
        if not (0 <= self.y0 <= self.m0 and 0 <= self.y1 <= self.m1):
            raise InputError(f"event counts out of range in {self}")

    @property
    def z(self) -> int:
        return self.y0 + self.y1

    @property
    def informative(self) -> bool:
        """The conditional law depends on psi only when ``0 < z < m0 + m1``."""
        return 0 < self.z < self.m0 + self.m1

    def swapped(self) -> "TwoByTwoTable":
        return TwoByTwoTable(self.y0, self.m0, self.y1, self.m1)


def default_grid(measure=EffectMeasure.OR) -> ParamGrid:
    if EffectMeasure.parse(measure) is EffectMeasure.RD:
        return ParamGrid.linspace(-1.0, 1.0, 401)
    return ParamGrid.linspace(-8.0, 8.0, 321)


# ----------------------------------------------------- eccentric hypergeometric


def _log_binom(n, k):
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def nchg_support(m0: int, m1: int, z: int) -> np.ndarray:
    return np.arange(max(0, z - m0), min(z, m1) + 1)


def _log_weights(m0, m1, z):
    return _log_weights_cached(int(m0), int(m1), int(z))


@functools.lru_cache(maxsize=4096)
def _log_weights_cached(m0, m1, z):
    u = nchg_support(m0, m1, z)
    lw = _log_binom(m0, z - u) + _log_binom(m1, u)
    u.flags.writeable = False
    lw.flags.writeable = False
    return u, lw


def nchg_logpmf(y1, psi, m0: int, m1: int, z: int):
    """Log pmf of the treatment count given the margin.

    Broadcasts over ``y1`` and ``psi``; values of ``y1`` off the support
    give ``-inf``.
    """
    u, lw = _log_weights(m0, m1, z)
    psi = np.asarray(psi, dtype=float)
    y = np.asarray(y1)
    if np.any(y != np.round(y)):
        raise InputError("y1 must be an integer count")
    y = y.astype(int)
    lognorm = nm.logsumexp(lw + psi[..., None] * u, axis=-1)
    on = (y >= u[0]) & (y <= u[-1])
    idx = np.clip(y - u[0], 0, u.size - 1)
    with np.errstate(invalid="ignore"):
        out = np.where(on, lw[idx] + psi * y - lognorm, -np.inf)
    return out if np.ndim(out) else float(out)


def nchg_pmf(y1, psi, m0: int, m1: int, z: int):
    """Probability of ``y1`` given the margin (0 off the support)."""
    return np.exp(nchg_logpmf(y1, psi, m0, m1, z))


def _nchg_table(psi, m0, m1, z):
    """Support and full pmf matrix (``psi`` axes first)."""
    u, lw = _log_weights(m0, m1, z)
    psi = np.asarray(psi, dtype=float)
    a = lw + psi[..., None] * u
    return u, np.exp(a - nm.logsumexp(a, axis=-1, keepdims=True))


def _nchg_moments(psi, m0, m1, z):
    u, p = _nchg_table(psi, m0, m1, z)
    mean = np.sum(p * u, axis=-1)
    var = np.sum(p * u * u, axis=-1) - mean * mean
    return mean, np.maximum(var, 0.0)


# ------------------------------------------------------------ per-source CDs


def source_cd_or(table: TwoByTwoTable, grid=None) -> ConfidenceDistribution:
    """``P_psi(Y1 > y1 | z) + 1/2 P_psi(Y1 = y1 | z)`` for the log odds ratio.

    A non-informative table (``z = 0`` or ``z = m0 + m1``) gives the flat
    CD ``1/2``; check :attr:`TwoByTwoTable.informative` to detect it.
    """
    g = default_grid() if grid is None else _as_grid(grid)

    def func(psi, _t=table):
        psi = np.asarray(psi, dtype=float)
        if not _t.informative:
            return np.full(psi.shape, 0.5)
        u, p = _nchg_table(psi, _t.m0, _t.m1, _t.z)
        above = np.sum(np.where(u > _t.y1, p, 0.0), axis=-1)
        at = np.sum(np.where(u == _t.y1, p, 0.0), axis=-1)
        return np.clip(above + 0.5 * at, 0.0, 1.0)

    return ConfidenceDistribution(g, np.maximum.accumulate(func(g.values)), func=func)


def optimal_cd_common(tables: Sequence[TwoByTwoTable], grid=None, sims: int = 2000,
                      rng: nm.RngStream | None = None, method: str = "simulate") -> ConfidenceDistribution:
    """Optimal CD for a common log odds ratio through ``B = sum_j Y1_j``.

    ``P_psi(B > b | z) + 1/2 P_psi(B = b | z)``.  With ``method="simulate"``
    the law of ``B`` is simulated with the same uniforms at every grid value
    (inverse-c.d.f. draws), which keeps the estimated CD monotone in ``psi``;
    ``method="exact"`` convolves the conditional pmfs instead.
    """
    g = default_grid() if grid is None else _as_grid(grid)
    inf = [t for t in tables if t.informative]
    if not inf:
        raise DegenerateDataError("no informative tables: the CD is flat")
    b = sum(t.y1 for t in inf)
    psi = g.values
    if method == "exact":
        vals = np.empty(psi.size)
        for i, p in enumerate(psi):
            dist = np.array([1.0])
            offset = 0
            for t in inf:
                u, pm = _nchg_table(p, t.m0, t.m1, t.z)
                dist = np.convolve(dist, pm)
                offset += int(u[0])
            support = offset + np.arange(dist.size)
            vals[i] = dist[support > b].sum() + 0.5 * dist[support == b].sum()
    elif method == "simulate":
        if sims < 100:
            raise InputError("need at least 100 simulations")
        rng = rng or nm.RngStream(0)
        unif = rng.generator(0).random((sims, len(inf)))
        vals = np.empty(psi.size)
        for i, p in enumerate(psi):
            bsum = np.zeros(sims)
            for j, t in enumerate(inf):
                u, pm = _nchg_table(p, t.m0, t.m1, t.z)
                cdf = np.cumsum(pm)
                cdf[-1] = 1.0
                bsum += u[np.searchsorted(cdf, unif[:, j], side="right").clip(max=u.size - 1)]
            vals[i] = np.mean(bsum > b) + 0.5 * np.mean(bsum == b)
    else:
        raise InputError(f"unknown method {method!r}")
    return ConfidenceDistribution(g, np.maximum.accumulate(np.clip(vals, 0.0, 1.0)))


# ---------------------------------------------------------- conversion/fusion


@dataclass(frozen=True, eq=False)
class _ExactSource:
    """Conditional log-likelihood of one table with analytic derivatives."""

    table: TwoByTwoTable
    grid: ParamGrid
    values: np.ndarray
    top: float

    def __call__(self, psi):
        t = self.table
        return np.asarray(nchg_logpmf(t.y1, psi, t.m0, t.m1, t.z)) - self.top

    func = property(lambda self: self.__call__)

    def derivs(self, psi):
        t = self.table
        u, lw = _log_weights(t.m0, t.m1, t.z)
        psi = np.asarray(psi, dtype=float)
        a = lw + psi[..., None] * u
        lognorm = nm.logsumexp(a, axis=-1, keepdims=True)
        p = np.exp(a - lognorm)
        mean = np.sum(p * u, axis=-1)
        var = np.maximum(np.sum(p * u * u, axis=-1) - mean * mean, 0.0)
        value = lw[t.y1 - u[0]] + psi * t.y1 - lognorm[..., 0] - self.top
        return value, t.y1 - mean, -var


def conditional_loglik(table: TwoByTwoTable, grid=None):
    """Exact conversion of the per-table CD: ``l(psi) = log g(y1; psi)``.

    Returned object behaves like a confidence log-likelihood (callable,
    ``grid``/``values``) and also exposes analytic derivatives.
    """
    if not table.informative:
        raise DegenerateDataError("non-informative table has a constant conditional likelihood")
    g = default_grid() if grid is None else _as_grid(grid)
    raw = nchg_logpmf(table.y1, g.values, table.m0, table.m1, table.z)
    top = float(np.max(raw))
    return _ExactSource(table, g, raw - top, top)


def fused_cc_exact_or(tables: Sequence[TwoByTwoTable], grid=None, levels=DEFAULT_LEVELS) -> FusionResult:
    """Sum of conditional log-likelihoods for a common log odds ratio, Wilks cc.

    Non-informative tables only add constants and are dropped.  When every
    treatment (control) arm is empty the maximum sits at minus (plus)
    infinity; the curve is then one-sided and flagged in the diagnostics.
    """
    g = default_grid() if grid is None else _as_grid(grid)
    inf = [t for t in tables if t.informative]
    if not inf:
        raise DegenerateDataError("no informative tables")
    total = np.zeros(len(g))
    for t in inf:
        total += nchg_logpmf(t.y1, g.values, t.m0, t.m1, t.z)
    diag = {"tables_used": len(inf), "tables_dropped": len(tables) - len(inf)}
    diag.update(_infinity_flags(inf))
    return fusion_result(g, total, levels, diag)


def _infinity_flags(tables):
    # conditional ML is infinite when each informative table sits at a support end
    at_lo = all(t.y1 == max(0, t.z - t.m0) for t in tables)
    at_hi = all(t.y1 == min(t.z, t.m1) for t in tables)
    return {"ml_at_minus_infinity": bool(at_lo), "ml_at_plus_infinity": bool(at_hi)}


# ------------------------------------------------------- profile (standard)


def _binom_ll(y, m, p):
    return special.xlogy(y, p) + special.xlog1py(m - y, -p)


def _pair_ll(table, psi, theta, measure):
    if measure is EffectMeasure.OR:
        # log-space forms avoid log(0) for extreme linear predictors
        eta = theta + psi
        l0 = -table.y0 * np.logaddexp(0, -theta) - (table.m0 - table.y0) * np.logaddexp(0, theta)
        l1 = -table.y1 * np.logaddexp(0, -eta) - (table.m1 - table.y1) * np.logaddexp(0, eta)
        return l0 + l1
    if measure is EffectMeasure.RR:
        p0 = np.exp(np.minimum(theta, 0.0))
        p1 = np.exp(np.minimum(theta + psi, 0.0))
        return _binom_ll(table.y0, table.m0, p0) + _binom_ll(table.y1, table.m1, p1)
    p0 = np.clip(theta, 0.0, 1.0)
    p1 = np.clip(theta + psi, 0.0, 1.0)
    return _binom_ll(table.y0, table.m0, p0) + _binom_ll(table.y1, table.m1, p1)


def _theta_bounds(psi, measure):
    if measure is EffectMeasure.OR:
        return np.full(psi.shape, -40.0), np.full(psi.shape, 40.0)
    if measure is EffectMeasure.RR:
        return np.full(psi.shape, -40.0), np.minimum(0.0, -psi)
    return np.maximum(0.0, -psi), np.minimum(1.0, 1.0 - psi)


def _profiles(tables: Sequence[TwoByTwoTable], psi, measure) -> np.ndarray:
    """Per-table profiles, one row per table, by one batched golden-section search."""
    psi = np.asarray(psi, dtype=float)
    cols = np.array([[t.y1, t.m1, t.y0, t.m0] for t in tables], dtype=float).T[..., None]
    batch = SimpleNamespace(y1=cols[0], m1=cols[1], y0=cols[2], m0=cols[3])
    lo, hi = _theta_bounds(psi, measure)
    feasible = lo <= hi
    shape = (len(tables),) + psi.shape
    lo = np.broadcast_to(np.where(feasible, lo, 0.0), shape)
    hi = np.broadcast_to(np.where(feasible, hi, 0.0), shape)

    def neg(theta):
        with np.errstate(divide="ignore", invalid="ignore"):
            v = _pair_ll(batch, psi, theta, measure)
        return np.where(np.isnan(v), np.inf, -v)

    _, fx = nm.golden_section_batch(neg, lo, hi, tol=1e-10, maxiter=120)
    return np.where(feasible, -fx, -np.inf)


def source_profile(table: TwoByTwoTable, psi, measure=EffectMeasure.OR) -> np.ndarray:
    """Binomial-pair log-likelihood maximised over the baseline parameter.

    Parameterisations: odds ratio ``logit p0 = theta``, ``logit p1 = theta + psi``;
    risk ratio ``log p0 = theta``, ``log p1 = theta + psi``; risk difference
    ``p0 = theta``, ``p1 = theta + psi``.  Infeasible ``psi`` give ``-inf``.
    """
    measure = EffectMeasure.parse(measure)
    psi = np.asarray(psi, dtype=float)
    return _profiles([table], psi.ravel(), measure)[0].reshape(psi.shape)


def standard_iiccff(tables: Sequence[TwoByTwoTable], measure=EffectMeasure.OR, grid=None,
                    levels=DEFAULT_LEVELS) -> FusionResult:
    """Profile each table over its baseline parameter, sum, Wilks cc."""
    measure = EffectMeasure.parse(measure)
    g = default_grid(measure) if grid is None else _as_grid(grid)
    if not tables:
        raise InputError("need at least one table")
    total = _profiles(list(tables), g.values, measure).sum(axis=0)
    if not np.any(np.isfinite(total)):
        raise DegenerateDataError("no feasible effect value on the grid")
    diag = {"measure": measure.value}
    if measure is not EffectMeasure.RD:
        diag["all_control_arms_empty"] = all(t.y0 == 0 for t in tables)
        diag["all_treatment_arms_empty"] = all(t.y1 == 0 for t in tables)
    return fusion_result(g, total, levels, diag)


# ---------------------------------------------------------- random effects


def random_effects_2x2(tables: Sequence[TwoByTwoTable], psi0_grid=None, tau_grid=None, corrected: bool = True,
                       levels=DEFAULT_LEVELS, nodes: int = nm.GH_NODES, guard: str = "round",
                       both: bool = False):
    """Random-effects log odds ratio: ``psi_j ~ N(psi0, tau^2)``.

    Each table's conditional likelihood is integrated against the normal
    kernel (adaptive Gauss-Hermite), the spread is profiled out and, when
    ``corrected``, ``log tau_hat(psi0)`` is added.  The default guard skips the
    correction for the whole analysis when the spread estimate at the
    maximum is below 1e-4 (see :func:`iiccff.fuse.cox_reid_random`).

    With ``both=True`` the uncorrected and corrected results are returned as
    a pair, sharing one quadrature surface.
    """
    inf = [t for t in tables if t.informative]
    if len(inf) < 2:
        raise DegenerateDataError("random-effects fusion needs at least two informative tables")
    g = default_grid() if psi0_grid is None else _as_grid(psi0_grid)
    srcs = [conditional_loglik(t, g) for t in inf]
    if tau_grid is None:
        tau_grid = 3.0 * np.linspace(0.0, 1.0, 21) ** 2
    surface = fuse_random(srcs, g, tau_grid, nodes=nodes)
    prof, t_hat = surface.profile(tol=1e-5)
    out = []
    for corr in ((False, True) if both else (corrected,)):
        p, diag = prof, {"tau_hat": t_hat, "correction_applied": False, "tables_used": len(inf)}
        if corr:
            p, d = cox_reid_random(prof, t_hat, guard)
            diag.update(d)
        out.append(fusion_result(g, p, levels, diag))
    return tuple(out) if both else out[0]


# ----------------------------------------------------------- Mantel-Haenszel


@dataclass(frozen=True)
class MHResult:
    estimate: float
    interval: tuple
    variance: float
    whole_line: bool = False

    def covers(self, value: float) -> bool:
        return self.whole_line or self.interval[0] <= value <= self.interval[1]

    @property
    def width(self) -> float:
        return math.inf if self.whole_line else self.interval[1] - self.interval[0]


def mantel_haenszel(tables: Sequence[TwoByTwoTable], measure=EffectMeasure.OR, level: float = 0.95) -> MHResult:
    """Mantel-Haenszel pooled effect with a Wald interval.

    Odds ratio variance: Robins-Breslow-Greenland; risk ratio and risk
    difference variances: Greenland-Robins (the latter with a plus sign
    between the two terms of the numerator).  Log scale for OR and RR.

    Raises :class:`UndefinedEstimateError` for OR/RR when every control arm is
    empty; when every treatment arm is empty the interval is the whole line
    (``whole_line=True``).
    """
    measure = EffectMeasure.parse(measure)
    if not tables:
        raise InputError("need at least one table")
    a = np.array([t.y1 for t in tables], dtype=float)
    n1 = np.array([t.m1 for t in tables], dtype=float)
    c = np.array([t.y0 for t in tables], dtype=float)
    n0 = np.array([t.m0 for t in tables], dtype=float)
    b, d = n1 - a, n0 - c
    N = n0 + n1
    z = float(nm.norm_quantile(0.5 + level / 2.0))

    if measure is not EffectMeasure.RD and np.all(c == 0):
        raise UndefinedEstimateError("undefined estimate: no events in any control arm")
    whole = measure is not EffectMeasure.RD and bool(np.all(a == 0))

    if measure is EffectMeasure.OR:
        R, S = a * d / N, b * c / N
        P, Q = (a + d) / N, (b + c) / N
        sR, sS = R.sum(), S.sum()
        if whole:
            return MHResult(-math.inf, (-math.inf, math.inf), math.inf, True)
        if sS == 0:
            raise UndefinedEstimateError("undefined estimate: odds-ratio denominator is zero")
        est = math.log(sR / sS)
        var = (P * R).sum() / (2 * sR**2) + (P * S + Q * R).sum() / (2 * sR * sS) + (Q * S).sum() / (2 * sS**2)
    elif measure is EffectMeasure.RR:
        num, den = (a * n0 / N).sum(), (c * n1 / N).sum()
        if whole:
            return MHResult(-math.inf, (-math.inf, math.inf), math.inf, True)
        est = math.log(num / den)
        var = ((n1 * n0 * (a + c) - a * c * N) / N**2).sum() / (num * den)
    else:
        W = (n1 * n0 / N).sum()
        est = float(((a * n0 - c * n1) / N).sum() / W)
        var = float(((a * b * n0**3 + c * d * n1**3) / (n1 * n0 * N**2)).sum() / W**2)
    if not (math.isfinite(var) and var >= 0):
        return MHResult(est, (-math.inf, math.inf), math.inf, True)
    half = z * math.sqrt(var)
    return MHResult(float(est), (est - half, est + half), float(var))


# --------------------------------------------------------------------- files


def read_tables(path) -> list:
    """Read ``y1,m1,y0,m0`` rows."""
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["y1", "m1", "y0", "m0"]:
            raise InputError(f"{path}: expected header 'y1,m1,y0,m0', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                if len(row) != 4:
                    raise ValueError("expected four fields")
                vals = [float(v) for v in row]
                out.append(TwoByTwoTable(*vals))
            except (ValueError, InputError) as exc:
                raise InputError(f"{path}: malformed row {lineno}: {','.join(row)!r} ({exc})") from None
    if not out:
        raise InputError(f"{path}: no tables")
    return out
