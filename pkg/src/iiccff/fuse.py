"""Focused fusion of confidence log-likelihoods.

The fused log-likelihood is the sum of per-source contributions.  For a
scalar focus parameter it is profiled: at each focus value the remaining
coordinates are optimised subject to the focus constraint.  The resulting
deviance is calibrated by the chi-squared(1) law (Wilks) unless a caller
supplies another calibrator.

Random effects are handled by integrating each source's contribution
against a normal kernel for its parameter (adaptive Gauss-Hermite), which
produces a surface in (centre, spread) that is then profiled over the
spread, with an optional Cox-Reid type correction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .curves import (
    ConfidenceCurve,
    ConfidenceLogLik,
    CurveSummary,
    Deviance,
    ParamGrid,
    _as_grid,
    summarize,
    write_curve,
)
from .errors import DegenerateDataError, InputError, NumericalError

__all__ = [
    "FocusMap",
    "RandomEffectSpec",
    "FusionResult",
    "RandomFusionSurface",
    "fusion_result",
    "fuse_fixed",
    "fuse_linked",
    "fuse_random",
    "profile_random",
    "cox_reid_generic",
    "cox_reid_random",
    "add_prior",
    "fuse_weighted",
    "parabola_focus",
    "TAU_FLOOR",
]

DEFAULT_LEVELS = (0.90, 0.95)
TAU_FLOOR = 1e-4  # below this the +log(tau) correction is not applied
_PENALTY = 1e300


# ---------------------------------------------------------------------- types


@dataclass(frozen=True)
class FocusMap:
    """Focus ``phi(psi_1, ..., psi_d)`` and a way back onto the constraint set.

    ``complete(phi, free)`` returns the full parameter vector given the focus
    value and the ``d - 1`` free coordinates.  When it is omitted the
    coordinate ``solve_index`` is found numerically.  ``common=True`` marks
    the shared-parameter case ``phi = psi_1 = ... = psi_d``.
    """

    dim: int
    focus: Callable
    complete: Callable | None = None
    solve_index: int = -1
    common: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise InputError("focus map needs at least one coordinate")

    @classmethod
    def common_parameter(cls, k: int) -> "FocusMap":
        return cls(k, lambda psi: float(psi[0]), lambda phi, free: np.full(k, phi), common=True)

    @classmethod
    def identity(cls) -> "FocusMap":
        return cls.common_parameter(1)

    @property
    def free_index(self) -> list:
        s = self.solve_index % self.dim
        return [i for i in range(self.dim) if i != s]


@dataclass(frozen=True)
class RandomEffectSpec:
    family: str = "normal"
    center: float = 0.0
    spread: float = 0.0

    def __post_init__(self):
        if self.family != "normal":
            raise InputError(f"random-effect family {self.family!r} is not supported (normal only)")
        if not self.spread >= 0:
            raise InputError("spread must be non-negative")


@dataclass(frozen=True, eq=False)
class FusionResult:
    grid: ParamGrid
    loglik: ConfidenceLogLik
    deviance: Deviance
    cc: ConfidenceCurve
    estimate: float
    intervals: dict
    diagnostics: dict = field(default_factory=dict)

    def summary(self, level: float) -> CurveSummary:
        return summarize(self.cc, level)

    def interval(self, level: float) -> tuple:
        return self.summary(level).interval

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "intervals": {
                f"{lev:g}": [[float(a), float(b)] for a, b in s.intervals] for lev, s in self.intervals.items()
            },
            "open_at_hi": {f"{lev:g}": s.open_at_hi for lev, s in self.intervals.items()},
            "open_at_lo": {f"{lev:g}": s.open_at_lo for lev, s in self.intervals.items()},
            "boundary_mass": self.cc.boundary_mass_at_lo,
            "diagnostics": _jsonable(self.diagnostics),
        }

    def write(self, path, config: dict | None = None) -> Path:
        """Curve CSV at ``path`` plus a JSON summary next to it."""
        path = Path(path)
        summary = self.to_dict()
        if config is not None:
            summary["config"] = config
        write_curve(path, self.cc, "cc", tuple(self.intervals), extra={"summary": summary})
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _refine_peak(x, v) -> float:
    """Vertex of the parabola through the grid maximum and its neighbours."""
    i = int(np.argmax(v))
    if 0 < i < len(x) - 1 and np.all(np.isfinite(v[i - 1 : i + 2])):
        x0, x1, x2 = x[i - 1 : i + 2]
        y0, y1, y2 = v[i - 1 : i + 2]
        den = (x0 - x1) * (x0 - x2) * (x1 - x2)
        a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / den
        b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / den
        if a < 0:
            xv = -b / (2 * a)
            if x0 <= xv <= x2:
                return float(xv)
    return float(x[i])


def fusion_result(grid, profile, levels: Sequence[float] = DEFAULT_LEVELS, diagnostics: dict | None = None,
                  calibrator: Callable | None = None, boundary_mass: float = 0.0) -> FusionResult:
    """Wrap a profiled log-likelihood on ``grid`` into a :class:`FusionResult`.

    ``calibrator`` maps deviance values to cc values; the default is the
    chi-squared(1) c.d.f.
    """
    g = _as_grid(grid)
    ll = ConfidenceLogLik.from_values(g, profile)
    d = -2.0 * np.asarray(ll.values)
    dev = Deviance(g, d)
    if calibrator is None:
        ccv = np.where(np.isfinite(d), nm.chi2_cdf(np.where(np.isfinite(d), d, 0.0), 1), 1.0)
    else:
        ccv = np.asarray(calibrator(d), dtype=float)
    cc = ConfidenceCurve(g, ccv, boundary_mass)
    diag = dict(diagnostics or {})
    excluded = g.values[~np.isfinite(ll.values)]
    if excluded.size:
        diag.setdefault("excluded_focus_values", int(excluded.size))
    intervals = {}
    for lev in levels:
        try:
            intervals[float(lev)] = summarize(cc, lev)
        except DegenerateDataError:
            pass
    return FusionResult(g, ll, dev, cc, _refine_peak(g.values, ll.values), intervals, diag)


# ------------------------------------------------------------- fixed effects


def _eval(ll, x):
    return np.asarray(ll(x), dtype=float)


def _support(ll) -> tuple:
    """Range of the source parameter where the contribution is finite."""
    x = ll.grid.values
    fin = np.isfinite(ll.values)
    return float(x[fin][0]), float(x[fin][-1])


def fuse_fixed(lls: Sequence[ConfidenceLogLik], focus_map: FocusMap | None, focus_grid=None,
               levels: Sequence[float] = DEFAULT_LEVELS, warm_start: bool = True) -> FusionResult:
    """Profile ``sum_j l_j(psi_j)`` over ``{phi(psi) = phi}`` for each focus value."""
    lls = list(lls)
    if not lls:
        raise InputError("need at least one source")
    if focus_map is None:
        focus_map = FocusMap.common_parameter(len(lls))
    if focus_map.dim != len(lls):
        raise InputError(f"focus map has dimension {focus_map.dim} but {len(lls)} sources were given")
    if focus_grid is None:
        focus_grid = _auto_focus_grid(lls, focus_map)
    g = _as_grid(focus_grid)
    phis = g.values

    if focus_map.common:
        total = np.zeros_like(phis)
        for ll in lls:
            total = total + _eval(ll, phis)
        if not np.any(np.isfinite(total)):
            raise DegenerateDataError("sources have no common support on the focus grid")
        return fusion_result(g, total, levels, {"profiling": "pointwise-sum"})

    def joint(psi):
        return sum(float(_eval(ll, psi[j])) for j, ll in enumerate(lls))

    complete = focus_map.complete or _numeric_completion(lls, focus_map)
    free_idx = focus_map.free_index
    prof = np.full(phis.shape, -np.inf)
    if len(free_idx) == 1:
        j = free_idx[0]
        lo, hi = _support(lls[j])
        scan = np.linspace(lo, hi, 201)
        for i, phi in enumerate(phis):
            prof[i] = _profile_1d(lls, joint, complete, phi, scan)
    else:
        start = np.array([lls[j].argmax for j in free_idx])
        for i, phi in enumerate(phis):

            def negobj(free, _phi=phi):
                try:
                    v = joint(complete(_phi, np.asarray(free)))
                except (ValueError, NumericalError):
                    return _PENALTY
                return -v if np.isfinite(v) else _PENALTY

            x0 = start if warm_start else np.array([lls[j].argmax for j in free_idx])
            x, fx = nm.minimize_multivariate(negobj, x0)
            if fx < _PENALTY:
                prof[i] = -fx
                start = np.asarray(x)
    if not np.any(np.isfinite(prof)):
        raise DegenerateDataError("constraint set is empty on the whole focus grid")
    return fusion_result(g, prof, levels, {"profiling": "constrained", "free_coordinates": len(free_idx)})


def _profile_1d(lls, joint, complete, phi, scan) -> float:
    psi = None
    if hasattr(complete, "batch"):
        psi = complete.batch(phi, scan)
    if psi is None:
        psi = np.full((scan.size, len(lls)), np.nan)
        for k, x in enumerate(scan):
            try:
                psi[k] = complete(phi, np.array([x]))
            except (ValueError, NumericalError):
                pass
    ok = ~np.isnan(psi).any(axis=1)
    vals = np.full(scan.size, -np.inf)
    if ok.any():
        tot = np.zeros(int(ok.sum()))
        for j, ll in enumerate(lls):
            tot = tot + _eval(ll, psi[ok, j])
        vals[ok] = tot
    vals[np.isnan(vals)] = -np.inf
    if not np.any(np.isfinite(vals)):
        return -np.inf
    i = int(np.argmax(vals))
    lo, hi = scan[max(i - 1, 0)], scan[min(i + 1, scan.size - 1)]

    def neg(x):
        try:
            v = joint(complete(phi, np.array([x])))
        except (ValueError, NumericalError):
            return _PENALTY
        return -v if np.isfinite(v) else _PENALTY

    x, fx = nm.minimize_scalar(neg, (lo, hi), tol=1e-10 * max(1.0, abs(hi - lo)))
    return max(-fx, float(vals[i]))


def _numeric_completion(lls, fm: FocusMap):
    s = fm.solve_index % fm.dim
    lo, hi = _support(lls[s])
    scan = np.linspace(lo, hi, 257)
    free_idx = fm.free_index

    def complete(phi, free):
        psi = np.empty((fm.dim, scan.size))
        psi[free_idx] = np.asarray(free, dtype=float)[:, None]
        psi[s] = scan
        with np.errstate(all="ignore"):
            try:
                r = np.asarray(fm.focus(psi), dtype=float) - phi
                if r.shape != scan.shape:
                    raise TypeError
            except (TypeError, ValueError, IndexError):
                r = np.array([fm.focus(psi[:, c]) for c in range(scan.size)], dtype=float) - phi
        point = psi[:, 0].copy()

        def resid(x):
            point[s] = x
            with np.errstate(all="ignore"):
                return float(fm.focus(point)) - phi

        ok = np.isfinite(r)
        sign = np.sign(r)
        idx = np.flatnonzero(ok[:-1] & ok[1:] & (sign[:-1] * sign[1:] <= 0))
        if idx.size == 0:
            raise ValueError("focus value not reachable from these free coordinates")
        best, best_v = None, -np.inf
        for i in idx:
            root = nm.find_root(resid, (scan[i], scan[i + 1]))
            v = float(_eval(lls[s], root))
            if best is None or v > best_v:
                best, best_v = root, v
        point[s] = best
        return point.copy()

    def batch(phi, frees):
        """Completions for many values of a single free coordinate at once.

        Returns an ``(n, dim)`` array with NaN rows where ``phi`` is not
        reachable; ``None`` when the focus does not vectorise.
        """
        frees = np.asarray(frees, dtype=float)
        n = frees.size
        psi = np.empty((fm.dim, n, scan.size))
        psi[free_idx[0]] = frees[:, None]
        psi[s] = scan[None, :]
        with np.errstate(all="ignore"):
            try:
                r = np.asarray(fm.focus(psi), dtype=float) - phi
            except (TypeError, ValueError, IndexError):
                return None
        if r.shape != (n, scan.size):
            return None
        ok = np.isfinite(r)
        sign = np.sign(r)
        rows, cols = np.nonzero(ok[:, :-1] & ok[:, 1:] & (sign[:, :-1] * sign[:, 1:] <= 0))
        out = np.full((n, fm.dim), np.nan)
        if rows.size == 0:
            return out
        a, b = scan[cols], scan[cols + 1]
        fa = r[rows, cols]
        pts = np.empty((fm.dim, rows.size))
        pts[free_idx[0]] = frees[rows]
        for _ in range(60):
            mid = 0.5 * (a + b)
            pts[s] = mid
            with np.errstate(all="ignore"):
                fm_ = np.asarray(fm.focus(pts), dtype=float) - phi
            left = np.sign(fm_) == np.sign(fa)
            a = np.where(left, mid, a)
            fa = np.where(left, fm_, fa)
            b = np.where(left, b, mid)
        root = 0.5 * (a + b)
        val = np.asarray(_eval(lls[s], root), dtype=float)
        val = np.where(np.isnan(val), -np.inf, val)
        # keep the best root per row: sort by value, last write wins
        order = np.argsort(val, kind="stable")
        out[rows[order], free_idx[0]] = frees[rows[order]]
        out[rows[order], s] = root[order]
        return out

    complete.batch = batch
    return complete


def _auto_focus_grid(lls, fm: FocusMap, n: int = 401) -> ParamGrid:
    boxes = []
    for ll in lls:
        inside = ll.grid.values[ll.values >= -0.5 * nm.chi2_quantile(0.999, 1)]
        boxes.append((float(inside[0]), float(inside[-1]), ll.argmax))
    vals = []
    for corner in itertools.product(*[(b[0], b[2], b[1]) for b in boxes]):
        try:
            v = float(fm.focus(np.array(corner)))
        except (ValueError, ZeroDivisionError, FloatingPointError):
            continue
        if math.isfinite(v):
            vals.append(v)
    if len(vals) < 2 or max(vals) <= min(vals):
        raise InputError("could not derive a focus grid automatically; pass one explicitly")
    lo, hi = min(vals), max(vals)
    pad = 0.05 * (hi - lo)
    return ParamGrid.linspace(lo - pad, hi + pad, n)


# ------------------------------------------------------------- linked models


def parabola_focus(x: Sequence[float]):
    """Links ``mu_j = b0 + b1 x_j + b2 x_j^2`` and the focus ``x* = -b1 / (2 b2)``.

    Returns ``(links, focus, complete)`` for :func:`fuse_linked`; the free
    coordinates are ``(b0, b2)``.
    """
    x = np.asarray(x, dtype=float)
    links = [lambda b, _x=xj: b[0] + b[1] * _x + b[2] * _x * _x for xj in x]

    def focus(b):
        if b[2] == 0:
            return 0.0 if b[1] == 0 else math.copysign(math.inf, -b[1] * 1.0)
        return -b[1] / (2.0 * b[2])

    def complete(xstar, free):
        b0, b2 = free
        return np.array([b0, -2.0 * b2 * xstar, b2])

    return links, focus, complete


def fuse_linked(lls: Sequence[ConfidenceLogLik], links: Sequence[Callable], focus: Callable, complete: Callable,
                focus_grid, start, levels: Sequence[float] = DEFAULT_LEVELS) -> FusionResult:
    """Profile ``sum_j l_j(g_j(beta))`` for a scalar focus ``focus(beta)``.

    ``complete(phi, free)`` maps a focus value and the free coordinates back
    to ``beta``; ``start`` is the initial free vector (warm-started along the
    grid).  Links landing outside a source's tabulated support give ``-inf``
    contributions, which exclude that ``beta``.
    """
    lls = list(lls)
    if len(lls) != len(links):
        raise InputError("need one link per source")
    g = _as_grid(focus_grid)
    free0 = np.atleast_1d(np.asarray(start, dtype=float))
    if free0.size + 1 > 5:
        raise InputError("linked fusion supports at most five coefficients")

    def total(beta):
        s = 0.0
        for ll, link in zip(lls, links):
            s += float(_eval(ll, link(beta)))
        return s

    # profile outward from the best focus value so warm starts follow the ridge
    prof = np.full(len(g), -np.inf)
    sols = [None] * len(g)
    coarse = np.array([_neg_safe(total, complete, phi, free0)[1] for phi in g.values])
    if free0.size == 0:
        # nothing to profile: the focus determines every coefficient
        prof = np.where(coarse < _PENALTY, -coarse, -np.inf)
        if not np.any(np.isfinite(prof)):
            raise DegenerateDataError("linked model has no feasible coefficients on the focus grid")
        return fusion_result(g, prof, levels, {"profiling": "linked", "coefficients": 1})
    i0 = int(np.argmin(coarse))
    order = [list(range(i0, len(g))), list(range(i0 - 1, -1, -1))]
    for path in order:
        x = free0.copy()
        if path and path[0] < i0 and sols[i0] is not None:
            x = sols[i0]
        for i in path:
            phi = g.values[i]
            xs, fx = nm.minimize_multivariate(lambda f, _p=phi: _neg_safe(total, complete, _p, f)[1], x)
            if fx < _PENALTY:
                prof[i] = -fx
                sols[i] = np.asarray(xs)
                x = sols[i]
    if not np.any(np.isfinite(prof)):
        raise DegenerateDataError("linked model has no feasible coefficients on the focus grid")
    return fusion_result(g, prof, levels, {"profiling": "linked", "coefficients": free0.size + 1})


def _neg_safe(total, complete, phi, free):
    try:
        v = total(complete(phi, np.asarray(free)))
    except (ValueError, NumericalError):
        return None, _PENALTY
    return None, (-v if np.isfinite(v) else _PENALTY)


# ------------------------------------------------------------- random effects


def _source_derivs(src, u, step):
    """Value, first and second derivative of a source contribution at ``u``."""
    if hasattr(src, "derivs"):
        return src.derivs(u)
    f0 = _eval(src, u)
    fp = _eval(src, u + step)
    fm = _eval(src, u - step)
    with np.errstate(invalid="ignore"):
        d1 = (fp - fm) / (2 * step)
        d2 = (fp - 2 * f0 + fm) / (step * step)
    return f0, np.where(np.isfinite(d1), d1, 0.0), np.where(np.isfinite(d2), d2, 0.0)


def _fd_step(src, u):
    if getattr(src, "func", None) is not None or hasattr(src, "derivs"):
        return 1e-4 * (1.0 + np.abs(u))
    return np.maximum(1e-4 * (1.0 + np.abs(u)), 2.0 * src.grid.step)


def _source_peak(src) -> float:
    v = np.asarray(src.values, dtype=float)
    return float(src.grid.values[int(np.argmax(np.where(np.isfinite(v), v, -np.inf)))])


def integrate_source(src, psi0, tau, nodes: int = nm.GH_NODES, newton_steps: int = 5):
    """``log int exp(l(u)) N(u; psi0, tau^2) du`` for arrays of ``(psi0, tau)``.

    The Gauss-Hermite rule is re-centred at the mode of the integrand (a few
    damped Newton steps from ``psi0``) and scaled by its curvature.  At
    ``tau = 0`` the kernel is degenerate and the value is ``l(psi0)``.
    """
    psi0, tau = np.broadcast_arrays(np.asarray(psi0, dtype=float), np.asarray(tau, dtype=float))
    out = np.empty(psi0.shape)
    zero = tau <= 0
    if zero.any():
        out[zero] = _eval(src, psi0[zero])
    pos = ~zero
    if not pos.any():
        return out
    m, t = psi0[pos], tau[pos]
    prec = 1.0 / (t * t)
    # start from the mode of the Gaussian approximation: source peak and kernel
    # combined by precision, so sharply peaked sources far from psi0 are reached
    peak = _source_peak(src)
    _, _, c = _source_derivs(src, np.array([peak]), _fd_step(src, np.array([peak])))
    c = max(-float(c[0]), 0.0)
    u = (m * prec + peak * c) / (prec + c)
    for _ in range(newton_steps):
        _, d1, d2 = _source_derivs(src, u, _fd_step(src, u))
        grad = d1 - (u - m) * prec
        hess = np.minimum(d2, 0.0) - prec
        step = -grad / hess
        lim = 3.0 / np.sqrt(-hess)
        u = u + np.clip(step, -lim, lim)
    _, _, d2 = _source_derivs(src, u, _fd_step(src, u))
    scale = 1.0 / np.sqrt(np.maximum(-d2, 0.0) + prec)
    x, lw = nm.gauss_hermite_rule(nodes)
    nodes_u = u[:, None] + math.sqrt(2.0) * scale[:, None] * x[None, :]
    ll = _eval(src, nodes_u)
    if np.any(np.isnan(ll)) or np.any(ll == np.inf):
        bad = np.argwhere(np.isnan(ll) | (ll == np.inf))[0]
        raise NumericalError(f"source contribution non-finite at node u={nodes_u[tuple(bad)]:.6g}")
    logk = -0.5 * ((nodes_u - m[:, None]) / t[:, None]) ** 2 - np.log(t[:, None]) - 0.5 * math.log(2 * math.pi)
    val = nm.logsumexp(lw[None, :] + ll + logk, axis=1) + np.log(math.sqrt(2.0) * scale)
    out[pos] = val
    return out


@dataclass(frozen=True, eq=False)
class RandomFusionSurface:
    """Fused log-likelihood ``l(psi0, tau)`` (normalised to max 0 on the grid)."""

    sources: tuple
    psi0: ParamGrid
    tau: np.ndarray
    values: np.ndarray
    offset: float
    nodes: int = nm.GH_NODES

    def raw(self, psi0, tau):
        """Unnormalised fused log-likelihood at arbitrary points."""
        total = 0.0
        for src in self.sources:
            total = total + integrate_source(src, psi0, tau, self.nodes)
        return total

    def __call__(self, psi0, tau):
        return self.raw(psi0, tau) - self.offset

    def profile(self, tau_max: float | None = None, tol: float = 1e-6):
        """Maximise over the spread at each ``psi0`` grid value.

        A scan over the tabulated spreads locates a bracket, refined by a
        vectorised golden-section search.  Returns ``(profile, tau_hat)``.
        """
        taus = self.tau if tau_max is None else self.tau[self.tau <= tau_max]
        vals = self.values[:, : taus.size]
        i = np.argmax(np.where(np.isfinite(vals), vals, -np.inf), axis=1)
        lo = taus[np.maximum(i - 1, 0)]
        hi = taus[np.minimum(i + 1, taus.size - 1)]
        psi = self.psi0.values

        def neg(t):
            v = self.raw(psi, t)
            return np.where(np.isfinite(v), -v, np.inf)

        t_hat, fx = nm.golden_section_batch(neg, lo, hi, tol=tol, maxiter=80)
        prof = -fx - self.offset
        grid_best = vals[np.arange(psi.size), i]
        better = grid_best > prof
        prof = np.where(better, grid_best, prof)
        t_hat = np.where(better, taus[i], t_hat)
        return prof, t_hat


def _default_tau_grid(sources, tau_max=None, n: int = 41):
    if tau_max is None:
        widths = []
        for s in sources:
            fin = s.grid.values[np.isfinite(s.values)]
            widths.append(fin[-1] - fin[0])
        tau_max = max(widths) / 2.0
    # dense near zero, where border behaviour lives
    return tau_max * np.linspace(0.0, 1.0, n) ** 2


def fuse_random(lls: Sequence, psi0_grid, tau_grid=None, spec: RandomEffectSpec | None = None,
                nodes: int = nm.GH_NODES) -> RandomFusionSurface:
    """Fused log-likelihood surface under ``psi_j ~ N(psi0, tau^2)``.

    Each source contribution is integrated against the normal kernel by
    adaptive Gauss-Hermite quadrature.  ``lls`` may be confidence
    log-likelihoods or any callables with ``grid``/``values`` (and optionally
    ``derivs``).
    """
    if spec is not None and spec.family != "normal":
        raise InputError("only the normal random-effect family is supported")
    srcs = tuple(lls)
    if not srcs:
        raise InputError("need at least one source")
    g = _as_grid(psi0_grid)
    taus = np.asarray(_default_tau_grid(srcs) if tau_grid is None else tau_grid, dtype=float)
    if taus.ndim != 1 or np.any(taus < 0) or np.any(np.diff(taus) <= 0):
        raise InputError("tau grid must be non-negative and strictly increasing")
    surf = np.zeros((len(g), taus.size))
    for src in srcs:
        P, T = np.meshgrid(g.values, taus, indexing="ij")
        surf += integrate_source(src, P.ravel(), T.ravel(), nodes).reshape(P.shape)
    fin = np.isfinite(surf)
    if not fin.any():
        raise DegenerateDataError("fused integral underflows everywhere")
    offset = float(np.max(surf[fin]))
    return RandomFusionSurface(srcs, g, taus, surf - offset, offset, nodes)


def cox_reid_random(profile, tau_hat, guard: str = "pointwise"):
    """Add ``log tau_hat(psi0)`` to a profiled random-effects log-likelihood.

    The term is not applied where ``tau_hat < 1e-4``: with ``guard="pointwise"``
    it is skipped at those focus values only, with ``guard="round"`` the whole
    correction is dropped when the spread estimate at the profile maximum is
    below the floor.  Returns ``(corrected, diagnostics)``.
    """
    prof = np.asarray(profile, dtype=float)
    th = np.asarray(tau_hat, dtype=float)
    small = th < TAU_FLOOR
    diag = {"correction_applied": True, "correction_skipped_points": int(small.sum())}
    if guard == "round":
        i = int(np.argmax(prof))
        if small[i]:
            diag.update(correction_applied=False, correction_skipped_points=int(prof.size))
            return prof.copy(), diag
        corr = np.where(small, math.log(TAU_FLOOR), np.log(np.where(small, 1.0, th)))
    elif guard == "pointwise":
        corr = np.where(small, 0.0, np.log(np.where(small, 1.0, th)))
    else:
        raise InputError(f"unknown guard {guard!r}")
    diag["correction_skipped"] = bool(small.any())
    return prof + corr, diag


def profile_random(surface: RandomFusionSurface, corrected: bool = False, levels=DEFAULT_LEVELS,
                   guard: str = "pointwise") -> FusionResult:
    prof, t_hat = surface.profile()
    diag = {"tau_hat": t_hat, "correction_applied": False}
    if corrected:
        prof, d = cox_reid_random(prof, t_hat, guard)
        diag.update(d)
    return fusion_result(surface.psi0, prof, levels, diag)


# ------------------------------------------------------------ generic Cox-Reid


def _hessian(f, x, step):
    d = x.size
    H = np.empty((d, d))
    f0 = f(x)
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = step[a]
        H[a, a] = (f(x + ea) - 2 * f0 + f(x - ea)) / step[a] ** 2
        for b in range(a + 1, d):
            eb = np.zeros(d)
            eb[b] = step[b]
            H[a, b] = H[b, a] = (f(x + ea + eb) - f(x + ea - eb) - f(x - ea + eb) + f(x - ea - eb)) / (
                4 * step[a] * step[b]
            )
    return H


def cox_reid_generic(loglik: Callable, focus_grid, lam_start, lam_bounds=None, levels=DEFAULT_LEVELS,
                     corrected: bool = True) -> FusionResult:
    """Profile ``l(psi, lam)`` over ``lam`` and subtract ``1/2 log det J_lam,lam``.

    ``J`` is the observed nuisance information at ``lam_hat(psi)`` by central
    differences with step ``1e-4 (1 + |lam|)``.  Focus values where ``J`` is
    not positive definite keep the uncorrected profile and are counted in the
    diagnostics.  ``lam_bounds`` (a single ``(lo, hi)`` pair) switches the
    one-dimensional case to bounded scalar search.
    """
    g = _as_grid(focus_grid)
    lam = np.atleast_1d(np.asarray(lam_start, dtype=float))
    prof = np.empty(len(g))
    corr = np.zeros(len(g))
    lam_hat = np.empty((len(g), lam.size))
    skipped = 0
    for i, psi in enumerate(g.values):
        if lam.size == 1 and lam_bounds is not None:
            x, fx = nm.minimize_scalar(lambda v, _p=psi: -loglik(_p, np.array([v])), lam_bounds)
            lam = np.array([x])
        else:
            lam, fx = nm.minimize_multivariate(lambda v, _p=psi: -loglik(_p, v), lam)
            lam = np.asarray(lam)
        prof[i] = -fx
        lam_hat[i] = lam
        H = _hessian(lambda v, _p=psi: loglik(_p, v), lam, 1e-4 * (1.0 + np.abs(lam)))
        J = -H
        try:
            np.linalg.cholesky(J)
            sign, logdet = np.linalg.slogdet(J)
            corr[i] = -0.5 * logdet
        except np.linalg.LinAlgError:
            skipped += 1
    out = prof + corr if corrected else prof
    diag = {"correction_applied": corrected, "correction_skipped_points": skipped, "lambda_hat": lam_hat}
    return fusion_result(g, out, levels, diag)


# --------------------------------------------------------- priors and weights


def add_prior(profile: ConfidenceLogLik, prior: ConfidenceLogLik | Callable) -> ConfidenceLogLik:
    x = profile.grid.values
    pv = np.asarray(prior(x), dtype=float)
    total = np.asarray(profile.values) + pv
    if not np.any(np.isfinite(total)):
        raise DegenerateDataError("prior and profile have disjoint supports")
    return ConfidenceLogLik.from_values(profile.grid, total)


def fuse_weighted(lls: Sequence[ConfidenceLogLik], weights: Sequence[float], grid=None) -> ConfidenceLogLik:
    """``sum_j w_j l_j`` on a common grid (the first source's unless given).

    The weighted sum is not calibrated; treating its deviance as chi-squared
    is an approximation the caller has to justify.
    """
    lls = list(lls)
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(lls),):
        raise InputError("need one weight per source")
    if np.any(w < 0) or not np.any(w > 0):
        raise InputError("weights must be non-negative and not all zero")
    g = lls[0].grid if grid is None else _as_grid(grid)
    total = np.zeros(len(g))
    for wj, ll in zip(w, lls):
        if wj == 0:
            continue
        total = total + wj * _eval(ll, g.values)
    return ConfidenceLogLik.from_values(g, total)
