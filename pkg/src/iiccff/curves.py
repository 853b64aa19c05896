"""Confidence distributions, confidence curves and confidence log-likelihoods.

All three are tabulated on a :class:`ParamGrid`.  A confidence distribution
(CD) is a c.d.f. in the parameter whose value at the truth is uniform; the
confidence curve is ``cc = |1 - 2 C|``; a confidence log-likelihood is
normalised to have maximum zero.  Curves optionally carry a point mass at
the lower grid end (border parameters such as a spread at zero).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .errors import BracketError, DegenerateDataError, GridCoverageError, InputError

__all__ = [
    "ParamGrid",
    "ConfidenceDistribution",
    "ConfidenceCurve",
    "ConfidenceLogLik",
    "Deviance",
    "StudySummary",
    "CurveSummary",
    "normal_cd",
    "t_cd",
    "cc_from_cd",
    "deviance_from_loglik",
    "cc_from_deviance",
    "median_cd",
    "cd_from_interval",
    "power_transform",
    "summarize",
    "write_curve",
    "read_curve",
]

DEFAULT_POINTS = 512
DEFAULT_SPAN = 6.0


@dataclass(frozen=True, eq=False)
class ParamGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise InputError("a parameter grid needs at least two points")
        if not np.all(np.isfinite(v)):
            raise InputError("grid values must be finite")
        if np.any(np.diff(v) <= 0):
            raise InputError("grid values must be strictly increasing")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def linspace(cls, lo: float, hi: float, n: int = DEFAULT_POINTS) -> "ParamGrid":
        return cls(np.linspace(lo, hi, n))

    @classmethod
    def around(cls, center: float, scale: float, n: int = DEFAULT_POINTS, span: float = DEFAULT_SPAN):
        return cls.linspace(center - span * scale, center + span * scale, n)

    def __len__(self):
        return self.values.size

    @property
    def lo(self) -> float:
        return float(self.values[0])

    @property
    def hi(self) -> float:
        return float(self.values[-1])

    @property
    def step(self) -> float:
        return float(np.max(np.diff(self.values)))


def _as_grid(grid) -> ParamGrid:
    return grid if isinstance(grid, ParamGrid) else ParamGrid(np.asarray(grid, dtype=float))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ConfidenceDistribution:
    grid: ParamGrid
    values: np.ndarray
    boundary_mass_at_lo: float = 0.0
    func: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "grid", _as_grid(self.grid))
        v = _frozen(self.values)
        if v.shape != self.grid.values.shape:
            raise InputError("CD values must match the grid")
        if np.any(np.isnan(v)) or np.any(v < -1e-12) or np.any(v > 1 + 1e-12):
            raise InputError("CD values must lie in [0, 1]")
        if np.any(np.diff(v) < -1e-9):
            raise InputError("CD values must be non-decreasing along the grid")
        object.__setattr__(self, "values", v)
        if not 0.0 <= self.boundary_mass_at_lo <= 1.0:
            raise InputError("boundary mass must lie in [0, 1]")
        if self.boundary_mass_at_lo > 0 and abs(self.boundary_mass_at_lo - v[0]) > 1e-9:
            raise InputError("declared boundary mass must equal the CD value at the lower grid end")

    def __call__(self, x):
        if self.func is not None:
            return self.func(x)
        return np.interp(x, self.grid.values, self.values)

    def quantile(self, p: float) -> float:
        """Smallest grid-interpolated parameter value with C >= p."""
        v = self.values
        if p <= v[0]:
            return self.grid.lo
        if p > v[-1]:
            return math.inf
        i = int(np.searchsorted(v, p, side="left"))
        x0, x1 = self.grid.values[i - 1], self.grid.values[i]
        c0, c1 = v[i - 1], v[i]
        return float(x1 if c1 == c0 else x0 + (p - c0) * (x1 - x0) / (c1 - c0))


@dataclass(frozen=True, eq=False)
class ConfidenceCurve:
    grid: ParamGrid
    values: np.ndarray
    boundary_mass_at_lo: float = 0.0
    cd: ConfidenceDistribution | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid", _as_grid(self.grid))
        v = _frozen(np.clip(self.values, 0.0, 1.0))
        if v.shape != self.grid.values.shape or np.any(np.isnan(v)):
            raise InputError("cc values must be finite and match the grid")
        object.__setattr__(self, "values", v)
        if not 0.0 <= self.boundary_mass_at_lo <= 1.0:
            raise InputError("boundary mass must lie in [0, 1]")

    def __call__(self, x):
        return np.interp(x, self.grid.values, self.values)

    @property
    def argmin(self) -> float:
        return float(self.grid.values[int(np.argmin(self.values))])


@dataclass(frozen=True, eq=False)
class ConfidenceLogLik:
    """Grid-backed log-likelihood with maximum 0; ``-inf`` marks excluded values.

    ``func`` optionally evaluates the same (normalised) function off-grid.
    """

    grid: ParamGrid
    values: np.ndarray
    func: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "grid", _as_grid(self.grid))
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.values.shape:
            raise InputError("log-likelihood values must match the grid")
        if np.any(np.isnan(v)) or np.any(v == np.inf):
            raise InputError("log-likelihood values must be finite or -inf")
        if not np.any(np.isfinite(v)):
            raise DegenerateDataError("log-likelihood is -inf everywhere on the grid")
        if abs(np.max(v)) > 1e-9:
            raise InputError("confidence log-likelihood must be normalised to max 0")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_values(cls, grid, raw, func: Callable | None = None) -> "ConfidenceLogLik":
        raw = np.asarray(raw, dtype=float)
        finite = raw[np.isfinite(raw)]
        if finite.size == 0:
            raise DegenerateDataError("log-likelihood is -inf everywhere on the grid")
        top = float(np.max(finite))
        norm_func = None if func is None else (lambda x, _f=func, _t=top: np.asarray(_f(x)) - _t)
        return cls(grid, raw - top, norm_func)

    def __call__(self, x):
        if self.func is not None:
            return self.func(x)
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.grid.values, self.values)
        # outside the tabulated support nothing was reported
        out = np.where((x < self.grid.lo) | (x > self.grid.hi), -np.inf, out)
        return out if out.ndim else float(out)

    @property
    def argmax(self) -> float:
        return float(self.grid.values[int(np.argmax(self.values))])

    @property
    def excluded(self) -> np.ndarray:
        return self.grid.values[~np.isfinite(self.values)]


@dataclass(frozen=True, eq=False)
class Deviance:
    grid: ParamGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", _as_grid(self.grid))
        object.__setattr__(self, "values", _frozen(self.values))


@dataclass(frozen=True)
class StudySummary:
    estimate: float
    stddev: float
    df: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.estimate) and math.isfinite(self.stddev)):
            raise InputError("estimate and stddev must be finite")
        if not self.stddev > 0:
            raise InputError(f"stddev must be positive, got {self.stddev}")
        if self.df is not None and self.df < 1:
            raise InputError(f"df must be >= 1, got {self.df}")


# ---------------------------------------------------------------- constructors


def _default_grid(summary: StudySummary, grid) -> ParamGrid:
    if grid is None:
        return ParamGrid.around(summary.estimate, summary.stddev)
    return _as_grid(grid)


def normal_cd(summary: StudySummary, grid=None) -> ConfidenceDistribution:
    g = _default_grid(summary, grid)
    lo, hi = summary.estimate - 4 * summary.stddev, summary.estimate + 4 * summary.stddev
    if g.lo > lo + 1e-12 or g.hi < hi - 1e-12:
        raise GridCoverageError("grid must span the estimate +- 4 standard deviations")
    def func(x, _m=summary.estimate, _s=summary.stddev):
        return nm.norm_cdf((np.asarray(x, dtype=float) - _m) / _s)

    return ConfidenceDistribution(g, func(g.values), func=func)


def t_cd(summary: StudySummary, grid=None) -> ConfidenceDistribution:
    if summary.df is None:
        raise InputError("t_cd needs degrees of freedom on the summary")
    g = _default_grid(summary, grid)
    def func(x, _m=summary.estimate, _s=summary.stddev, _df=summary.df):
        return nm.t_cdf((np.asarray(x, dtype=float) - _m) / _s, _df)

    return ConfidenceDistribution(g, func(g.values), func=func)


def cc_from_cd(cd: ConfidenceDistribution) -> ConfidenceCurve:
    return ConfidenceCurve(cd.grid, np.abs(1.0 - 2.0 * cd.values), cd.boundary_mass_at_lo, cd)


def deviance_from_loglik(ll: ConfidenceLogLik) -> Deviance:
    return Deviance(ll.grid, -2.0 * ll.values)


def cc_from_deviance(dev: Deviance) -> ConfidenceCurve:
    d = np.asarray(dev.values)
    if np.any(d < -1e-9):
        raise InputError("deviance must be non-negative")
    # +inf deviance is an excluded value: full confidence
    return ConfidenceCurve(dev.grid, np.where(np.isfinite(d), nm.chi2_cdf(np.maximum(d, 0.0) * np.isfinite(d), 1), 1.0))


_JITTER_SEED = 20240101


def median_cd(sample: Sequence[float], grid=None) -> ConfidenceCurve:
    """Nonparametric CD for a population median from order statistics.

    ``C(y_(r)) = 1 - Be(1/2; r, n - r + 1)`` with linear interpolation between
    order statistics and 0/1 outside the sample range.  Ties are broken by a
    deterministic jitter of 1e-9 times the range.  The returned curve carries
    the CD in ``.cd``.
    """
    y = np.sort(np.asarray(sample, dtype=float))
    n = y.size
    if n < 2:
        raise InputError("median_cd needs at least two observations")
    if not np.all(np.isfinite(y)):
        raise InputError("sample must be finite")
    rng_ = y[-1] - y[0]
    if np.any(np.diff(y) == 0):
        if rng_ == 0:
            raise DegenerateDataError("all observations are equal")
        jitter = np.random.default_rng(_JITTER_SEED).uniform(-1e-9, 1e-9, n) * rng_
        y = np.sort(y + jitter)
    r = np.arange(1, n + 1)
    c_at = 1.0 - nm.beta_cdf(0.5, r, n - r + 1)
    if grid is None:
        pad = 0.2 * rng_
        grid = ParamGrid(np.union1d(np.linspace(y[0] - pad, y[-1] + pad, DEFAULT_POINTS), y))
    g = _as_grid(grid)
    vals = np.interp(g.values, y, c_at, left=0.0, right=1.0)
    return cc_from_cd(ConfidenceDistribution(g, vals))


def power_transform(x, a: float):
    """``sgn(a) x**a``, with the log limit used when ``|a| < 1e-3``."""
    x = np.asarray(x, dtype=float)
    if abs(a) < 1e-3:
        return np.log(x)
    return math.copysign(1.0, a) * x**a


def _power_inverse(h, a: float):
    h = np.asarray(h, dtype=float)
    if abs(a) < 1e-3:
        return np.exp(h)
    base = math.copysign(1.0, a) * h
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(base > 0, np.abs(base) ** (1.0 / a), np.inf if a < 0 else 0.0)
    return out


def cd_from_interval(median_est: float, lo: float, hi: float, level: float = 0.95, grid=None,
                     n: int = DEFAULT_POINTS):
    """CD ``Phi((h(x) - h(median)) / s)`` matching a median and equal-tailed interval.

    ``h(x) = sgn(a) x**a``.  Eliminating ``s`` leaves one equation in ``a``,
    solved by a sign scan then bisection on ``[-2, -1e-4]`` and ``[1e-4, 2]``.
    Returns ``(cd, a, s)``; the CD can be evaluated exactly off its grid.
    """
    if not (0 < lo < median_est < hi):
        raise InputError("need 0 < lo < median_est < hi")
    if not 0 < level < 1:
        raise InputError("level must lie in (0, 1)")
    z = float(nm.norm_quantile(0.5 + level / 2.0))
    a = _solve_power(median_est, lo, hi)
    s = float((power_transform(hi, a) - power_transform(median_est, a)) / z)
    if grid is None:
        zq = float(nm.norm_quantile(1 - 1e-4))
        h0 = float(power_transform(median_est, a))
        g_lo = float(_power_inverse(h0 - zq * s, a))
        g_hi = float(_power_inverse(h0 + zq * s, a))
        g_lo = max(g_lo, lo * 1e-3)
        g_hi = min(g_hi, hi * 1e3)
        grid = ParamGrid(np.geomspace(g_lo, g_hi, n))
    g = _as_grid(grid)
    if g.lo <= 0:
        raise GridCoverageError("power-transform CDs need a positive grid")
    h0 = float(power_transform(median_est, a))

    def func(x, _a=a, _s=s, _h0=h0):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = nm.norm_cdf((power_transform(np.where(x > 0, x, 1.0), _a) - _h0) / _s)
        return np.where(x > 0, out, 0.0)

    return ConfidenceDistribution(g, func(g.values), func=func), a, s


def _solve_power(m: float, lo: float, hi: float) -> float:
    # symmetric interval: linear transform solves both equations
    if math.isclose(hi - m, m - lo, rel_tol=1e-12):
        return 1.0

    def resid(a):
        if abs(a) < 1e-12:
            return math.log(hi) + math.log(lo) - 2 * math.log(m)
        return (hi**a - m**a + lo**a - m**a) / a

    for branch in (np.linspace(1e-4, 2.0, 401), np.linspace(-2.0, -1e-4, 401)):
        vals = np.array([resid(a) for a in branch])
        idx = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)
        if idx.size:
            i = int(idx[0])
            return nm.find_root(resid, (branch[i], branch[i + 1]), tol=1e-14)
    raise BracketError("no power a in [-2, 2] reproduces the interval (transform failure)")


# ------------------------------------------------------------------ summaries


@dataclass(frozen=True)
class CurveSummary:
    point_estimate: float
    level: float
    intervals: list
    boundary_mass: float
    closed_at_lo: bool = False
    open_at_hi: bool = False
    open_at_lo: bool = False

    @property
    def interval(self) -> tuple:
        """Hull of the confidence region."""
        return (self.intervals[0][0], self.intervals[-1][1])

    @property
    def width(self) -> float:
        lo, hi = self.interval
        return hi - lo

    def covers(self, value: float) -> bool:
        return any(a <= value <= b for a, b in self.intervals)


def summarize(cc: ConfidenceCurve, level: float = 0.95) -> CurveSummary:
    """Median-confidence point and the ``{cc <= level}`` region as disjoint intervals.

    Endpoints are linearly interpolated between grid points.  A region that
    reaches the upper grid end is reported open there (``open_at_hi``); at the
    lower end it is closed when a boundary mass is declared, open otherwise.
    """
    if not 0 < level < 1:
        raise InputError("level must lie in (0, 1)")
    x, v = cc.grid.values, cc.values
    inside = v <= level
    if not inside.any():
        raise DegenerateDataError(f"confidence curve exceeds {level} everywhere on the grid")
    point = float(x[int(np.argmin(v))])
    edges = np.diff(inside.astype(int))
    starts = list(np.flatnonzero(edges == 1) + 1)
    ends = list(np.flatnonzero(edges == -1))
    if inside[0]:
        starts.insert(0, 0)
    if inside[-1]:
        ends.append(len(x) - 1)

    def cross(i, j):
        # level crossing between grid points i (outside) and j (inside)
        vi, vj = v[i], v[j]
        if vi == vj:
            return float(x[j])
        return float(x[i] + (level - vi) * (x[j] - x[i]) / (vj - vi))

    intervals = []
    for s, e in zip(starts, ends):
        a = float(x[0]) if s == 0 else cross(s - 1, s)
        b = float(x[-1]) if e == len(x) - 1 else cross(e + 1, e)
        intervals.append((a, b))
    bm = cc.boundary_mass_at_lo
    return CurveSummary(
        point_estimate=point,
        level=level,
        intervals=intervals,
        boundary_mass=bm,
        closed_at_lo=bool(inside[0] and bm > 0),
        open_at_hi=bool(inside[-1]),
        open_at_lo=bool(inside[0] and bm == 0),
    )


# -------------------------------------------------------------- serialisation


def write_curve(path, curve, kind: str | None = None, level_marks: Sequence[float] = (0.90, 0.95),
                extra: dict | None = None) -> Path:
    """Write ``param,value`` CSV plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    if kind is None:
        kind = {
            ConfidenceCurve: "cc",
            ConfidenceDistribution: "cd",
            ConfidenceLogLik: "loglik",
            Deviance: "deviance",
        }[type(curve)]
    with path.open("w") as fh:
        fh.write("param,value\n")
        for p, val in zip(curve.grid.values, curve.values):
            fh.write(f"{float(p)!r},{float(val)!r}\n")
    meta = {
        "kind": kind,
        "boundary_mass": float(getattr(curve, "boundary_mass_at_lo", 0.0)),
        "level_marks": [float(x) for x in level_marks],
    }
    if extra:
        meta.update(extra)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return sidecar


def read_curve(path):
    """Inverse of :func:`write_curve`; the sidecar is optional (defaults to cc)."""
    path = Path(path)
    rows = []
    with path.open() as fh:
        header = fh.readline().strip().replace(" ", "")
        if header != "param,value":
            raise InputError(f"{path}: expected header 'param,value', got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            try:
                if len(parts) != 2:
                    raise ValueError
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise InputError(f"{path}: malformed row {lineno}: {line.strip()!r}") from None
    if len(rows) < 2:
        raise InputError(f"{path}: need at least two rows")
    grid = ParamGrid(np.array([r[0] for r in rows]))
    vals = np.array([r[1] for r in rows])
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {"kind": "cc", "boundary_mass": 0.0}
    kind = meta.get("kind", "cc")
    bm = float(meta.get("boundary_mass", 0.0))
    if kind == "cc":
        return ConfidenceCurve(grid, vals, bm)
    if kind == "cd":
        return ConfidenceDistribution(grid, vals, bm)
    if kind == "loglik":
        return ConfidenceLogLik(grid, vals)
    if kind == "deviance":
        return Deviance(grid, vals)
    raise InputError(f"{sidecar}: unknown curve kind {kind!r}")
