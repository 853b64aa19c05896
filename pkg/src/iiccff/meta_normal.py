"""Normal-normal random-effects meta-analysis.

Model: ``y_j | psi_j ~ N(psi_j, sigma_j^2)`` and ``psi_j ~ N(psi0, tau^2)``,
so marginally ``y_j ~ N(psi0, sigma_j^2 + tau^2)``.

The module provides the profile log-likelihood for ``psi0`` (with and
without the Cox-Reid correction for ``tau^2``), the direct and corrected
profiles for ``tau`` with exactly calibrated (simulated) confidence curves,
the ``Q_k`` confidence distribution for ``tau``, and the classical baselines:
inverse-variance pooling, DerSimonian-Laird, Hartung-Knapp-Sidik-Jonkman and
the normal-score (SXS) combination of CDs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .curves import ConfidenceCurve, ConfidenceDistribution, ParamGrid, StudySummary, _as_grid
from .errors import DegenerateDataError, InputError, NumericalError
from .fuse import DEFAULT_LEVELS, FusionResult, fusion_result

__all__ = [
    "NormalREInput",
    "TauProfiles",
    "loglik_re",
    "psi0_hat",
    "profile_psi0",
    "tau_profiles",
    "exact_cc_tau",
    "qk_cd_tau",
    "qk_statistic",
    "inverse_variance",
    "dersimonian_laird",
    "reml_tau",
    "hksj_interval",
    "sxs_combine",
    "sxs_reml",
    "read_studies",
]


@dataclass(frozen=True, eq=False)
class NormalREInput:
    studies: tuple

    def __post_init__(self):
        st = tuple(s if isinstance(s, StudySummary) else StudySummary(*s) for s in self.studies)
        if len(st) < 1:
            raise InputError("need at least one study")
        object.__setattr__(self, "studies", st)

    @classmethod
    def from_arrays(cls, y, sigma) -> "NormalREInput":
        y = np.asarray(y, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if y.shape != sigma.shape or y.ndim != 1:
            raise InputError("estimates and standard deviations must be 1-D and of equal length")
        return cls(tuple(StudySummary(float(a), float(b)) for a, b in zip(y, sigma)))

    @property
    def y(self) -> np.ndarray:
        return np.array([s.estimate for s in self.studies])

    @property
    def sigma(self) -> np.ndarray:
        return np.array([s.stddev for s in self.studies])

    @property
    def k(self) -> int:
        return len(self.studies)

    @property
    def tau_max(self) -> float:
        """Upper end of the spread search: ten times the larger of the biggest
        standard deviation and the sample spread of the estimates."""
        spread = float(np.std(self.y, ddof=1)) if self.k > 1 else 0.0
        return 10.0 * max(float(self.sigma.max()), spread)

    def require(self, k_min: int = 2):
        if self.k < k_min:
            raise InputError(f"need at least {k_min} studies, got {self.k}")


def _as_input(inp) -> NormalREInput:
    return inp if isinstance(inp, NormalREInput) else NormalREInput(tuple(inp))


# ------------------------------------------------------------- likelihoods


def loglik_re(inp, psi0, tau):
    """``sum_j {-1/2 log(s_j^2 + tau^2) - 1/2 (y_j - psi0)^2 / (s_j^2 + tau^2)}``.

    Broadcasts over ``psi0`` and ``tau``.
    """
    inp = _as_input(inp)
    psi0 = np.asarray(psi0, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise InputError("tau must be non-negative")
    v = inp.sigma**2 + tau[..., None] ** 2
    r = inp.y - psi0[..., None]
    out = np.sum(-0.5 * np.log(v) - 0.5 * r * r / v, axis=-1)
    return out if out.ndim else float(out)


def psi0_hat(inp, tau):
    """Weighted mean with weights ``1 / (sigma_j^2 + tau^2)`` (broadcasts over tau)."""
    inp = _as_input(inp)
    tau = np.asarray(tau, dtype=float)
    w = 1.0 / (inp.sigma**2 + tau[..., None] ** 2)
    out = np.sum(w * inp.y, axis=-1) / np.sum(w, axis=-1)
    return out if out.ndim else float(out)


def _tau_scan(tau_max, n=48):
    return tau_max * np.linspace(0.0, 1.0, n) ** 2


def _batch_min(obj, tau_max, shape, n_scan=48, tol=1e-9):
    """Minimise ``obj(tau)`` (vectorised over problems) on ``[0, tau_max]``."""
    scan = _tau_scan(tau_max, n_scan)
    vals = np.stack([obj(np.full(shape, t)) for t in scan], axis=-1)
    i = np.argmin(vals, axis=-1)
    lo = scan[np.maximum(i - 1, 0)]
    hi = scan[np.minimum(i + 1, scan.size - 1)]
    x, fx = nm.golden_section_batch(obj, lo, hi, tol=tol, maxiter=80)
    grid_best = np.take_along_axis(vals, i[..., None], axis=-1)[..., 0]
    better = grid_best < fx
    return np.where(better, scan[i], x), np.where(better, grid_best, fx)


def _tau_hat_given_psi0(inp, psi0, tau_max):
    psi0 = np.asarray(psi0, dtype=float)
    return _batch_min(lambda t: -loglik_re(inp, psi0, t), tau_max, psi0.shape)


def _tau2_information(inp, psi0, tau):
    """``sum_j {-1/2 / v_j^2 + (y_j - psi0)^2 / v_j^3}`` with ``v_j = sigma_j^2 + tau^2``."""
    v = inp.sigma**2 + np.asarray(tau, dtype=float)[..., None] ** 2
    r = inp.y - np.asarray(psi0, dtype=float)[..., None]
    return np.sum(-0.5 / v**2 + r * r / v**3, axis=-1)


def border_condition(inp, psi0):
    """Left side of the border rule; ``<= 0`` means ``tau_hat(psi0) = 0``."""
    inp = _as_input(inp)
    r = inp.y - np.asarray(psi0, dtype=float)[..., None]
    s2 = inp.sigma**2
    return np.sum((r * r / s2 - 1.0) / s2, axis=-1)


def _default_psi0_grid(inp, n=501, span=8.0):
    tau = reml_tau(inp)[0]
    w = 1.0 / (inp.sigma**2 + tau**2)
    est = float(np.sum(w * inp.y) / np.sum(w))
    se = float(1.0 / math.sqrt(np.sum(w)))
    return ParamGrid.linspace(est - span * se, est + span * se, n)


def profile_psi0(inp, corrected: bool = True, grid=None, levels: Sequence[float] = DEFAULT_LEVELS,
                 border_rule: str = "whole") -> FusionResult:
    """Profile log-likelihood for ``psi0`` with optional Cox-Reid correction.

    The spread is profiled out numerically on ``[0, 10 max sigma_j]``.  The
    correction subtracts ``1/2 log`` of the observed information for
    ``tau^2``.  ``border_rule="whole"`` drops the correction for the entire
    curve as soon as ``tau_hat(psi0) = 0`` for some grid value (where the
    information for ``tau^2`` is meaningless); ``"pointwise"`` drops it only
    at those values.
    """
    inp = _as_input(inp)
    inp.require(2)
    g = _default_psi0_grid(inp) if grid is None else _as_grid(grid)
    psi = g.values
    t_hat, negll = _tau_hat_given_psi0(inp, psi, inp.tau_max)
    prof = -negll
    diag = {"tau_hat": t_hat, "correction_applied": False, "border_rule_triggered": False}
    if corrected:
        on_border = border_condition(inp, psi) <= 0
        info = _tau2_information(inp, psi, t_hat)
        bad = on_border | ~(info > 0)
        diag["border_rule_triggered"] = bool(on_border.any())
        if border_rule == "whole":
            if not bad.any():
                prof = prof - 0.5 * np.log(info)
                diag["correction_applied"] = True
        elif border_rule == "pointwise":
            prof = prof - 0.5 * np.where(bad, 0.0, np.log(np.where(bad, 1.0, info)))
            diag["correction_applied"] = bool((~bad).any())
            diag["correction_skipped_points"] = int(bad.sum())
        else:
            raise InputError(f"unknown border rule {border_rule!r}")
    return fusion_result(g, prof, levels, diag)


# ------------------------------------------------------------ spread profiles


@dataclass(frozen=True, eq=False)
class TauProfiles:
    tau: np.ndarray
    A: np.ndarray
    B: np.ndarray
    tau_ml: float
    tau_cml: float


def _A(inp_y, inp_s2, tau):
    """Direct profile criterion, vectorised over leading axes of ``inp_y``."""
    tau = np.asarray(tau, dtype=float)
    v = inp_s2 + tau[..., None] ** 2
    w = 1.0 / v
    m = np.sum(w * inp_y, axis=-1) / np.sum(w, axis=-1)
    r = inp_y - m[..., None]
    return np.sum(np.log(v) + r * r * w, axis=-1), np.sum(w, axis=-1)


def _crit(y, s2, tau, variant):
    a, sw = _A(y, s2, tau)
    if variant == "ml":
        return a
    if variant == "cml":
        return a + np.log(sw)
    raise InputError(f"unknown variant {variant!r}; use 'ml' or 'cml'")


def _minimise_tau(y, s2, variant, tau_max):
    shape = y.shape[:-1]
    return _batch_min(lambda t: _crit(y, s2, t, variant), tau_max, shape)


def tau_profiles(inp, tau_grid=None) -> TauProfiles:
    """``A_k(tau)`` and ``B_k(tau) = A_k(tau) + log sum 1/(sigma_j^2 + tau^2)`` with minimisers."""
    inp = _as_input(inp)
    inp.require(2)
    taus = _tau_scan(inp.tau_max, 201) if tau_grid is None else np.asarray(tau_grid, dtype=float)
    s2 = inp.sigma**2
    A = _crit(inp.y, s2, taus, "ml")
    B = _crit(inp.y, s2, taus, "cml")
    t_ml, _ = _minimise_tau(inp.y, s2, "ml", inp.tau_max)
    t_cml, _ = _minimise_tau(inp.y, s2, "cml", inp.tau_max)
    return TauProfiles(taus, A, B, float(t_ml), float(t_cml))


def reml_tau(inp, maxiter: int = 200):
    """Restricted ML spread (minimiser of ``B_k``); returns ``(tau, converged)``.

    Uses Fisher scoring on ``tau^2`` from the DerSimonian-Laird start; if the
    iteration cap is hit, the DerSimonian-Laird value is returned with
    ``converged=False``.
    """
    inp = _as_input(inp)
    y, s2 = inp.y, inp.sigma**2
    t2 = dersimonian_laird(inp) ** 2
    for _ in range(maxiter):
        w = 1.0 / (s2 + t2)
        m = np.sum(w * y) / np.sum(w)
        r = y - m
        # REML score and expected information for tau^2
        score = 0.5 * (np.sum(w * w * r * r) - np.sum(w) + np.sum(w * w) / np.sum(w))
        info = 0.5 * np.sum(w * w)
        new = max(0.0, t2 + score / info)
        if abs(new - t2) < 1e-12 * max(1.0, t2) or (new == 0.0 and t2 == 0.0):
            return math.sqrt(new), True
        t2 = new
    return dersimonian_laird(inp), False


def dersimonian_laird(inp) -> float:
    inp = _as_input(inp)
    y, s2 = inp.y, inp.sigma**2
    if inp.k < 2:
        return 0.0
    w = 1.0 / s2
    m = np.sum(w * y) / np.sum(w)
    q = float(np.sum(w * (y - m) ** 2))
    denom = float(np.sum(w) - np.sum(w * w) / np.sum(w))
    return math.sqrt(max(0.0, (q - (inp.k - 1)) / denom))


# ------------------------------------------------------- exact spread curves


def _deviance(y, s2, taus, variant, tau_max):
    """Deviance ``crit(tau) - min crit`` for one or many datasets (leading axes)."""
    _, cmin = _minimise_tau(y, s2, variant, tau_max)
    return _crit(y, s2, taus, variant) - cmin


def exact_cc_tau(inp, variant: str = "cml", tau_grid=None, sims: int = 10_000,
                 rng: nm.RngStream | None = None, n_grid: int = 101) -> ConfidenceCurve:
    """Simulation-calibrated confidence curve for the spread.

    ``cc(tau) = P_tau{D(tau) <= D_obs(tau)}`` with ``D`` the deviance of the
    direct (``"ml"``) or corrected (``"cml"``) profile.  The law of ``D`` at a
    given ``tau`` does not involve ``psi0``, so datasets are drawn as
    ``y_j ~ N(0, sigma_j^2 + tau^2)``.  Grid point ``i`` uses its own random
    stream, so results do not depend on evaluation order or parallelism.

    The point estimate is inserted into the grid.  The returned curve carries
    its CD, and the CD value at zero is declared as boundary mass.
    """
    inp = _as_input(inp)
    inp.require(2)
    if sims < 1000:
        raise InputError("exact confidence curves need at least 1000 simulations")
    if variant not in ("ml", "cml"):
        raise InputError(f"unknown variant {variant!r}; use 'ml' or 'cml'")
    rng = rng or nm.RngStream(0)
    s2 = inp.sigma**2
    t_hat, _ = _minimise_tau(inp.y, s2, variant, inp.tau_max)
    t_hat = float(t_hat)
    if tau_grid is None:
        hi = max(2.0 * qk_cd_tau(inp).quantile(0.995), 4.0 * t_hat, 0.5 * float(inp.sigma.max()))
        if not math.isfinite(hi):
            hi = inp.tau_max
        tau_grid = np.linspace(0.0, hi, n_grid)
    taus = np.union1d(np.asarray(tau_grid, dtype=float), [t_hat])
    if taus[0] < 0:
        raise InputError("tau grid must be non-negative")
    d_obs = _deviance(inp.y, s2, taus, variant, inp.tau_max)
    cc = np.empty(taus.size)
    for i, t in enumerate(taus):
        gen = rng.generator(_grid_key(t))
        ystar = gen.standard_normal((sims, inp.k)) * np.sqrt(s2 + t * t)
        d_sim = _deviance(ystar, s2, np.full(sims, t), variant, inp.tau_max)
        cc[i] = np.mean(d_sim <= d_obs[i] + 1e-12)
    cc[taus == t_hat] = 0.0 if t_hat > 0 else cc[taus == t_hat]
    # CD: below the estimate C = (1 - cc)/2, above C = (1 + cc)/2
    cdv = np.where(taus < t_hat, 0.5 * (1.0 - cc), 0.5 * (1.0 + cc))
    cdv = np.maximum.accumulate(np.clip(cdv, 0.0, 1.0))
    bm = float(cdv[0]) if t_hat > 0 else 0.5
    g = ParamGrid(taus)
    cd = ConfidenceDistribution(g, cdv, bm)
    return ConfidenceCurve(g, cc, bm, cd)


def _grid_key(t: float) -> int:
    """Stream key derived from the grid value itself (order independent)."""
    return int(np.float64(t).view(np.uint64))


def qk_statistic(inp, tau):
    inp = _as_input(inp)
    tau = np.asarray(tau, dtype=float)
    v = inp.sigma**2 + tau[..., None] ** 2
    m = psi0_hat(inp, tau)
    r = inp.y - np.asarray(m)[..., None]
    return np.sum(r * r / v, axis=-1)


def qk_cd_tau(inp, tau_grid=None) -> ConfidenceDistribution:
    """``C(tau) = 1 - Gamma_{k-1}(Q_k(tau))`` with boundary mass ``C(0)``.

    The median-confidence point (where ``C = 1/2``) is inserted into the grid.
    """
    inp = _as_input(inp)
    inp.require(2)
    k = inp.k

    def func(t):
        return 1.0 - nm.chi2_cdf(qk_statistic(inp, t), k - 1)

    c0 = float(func(0.0))
    points = []
    if c0 < 0.5:
        hi = inp.tau_max
        try:
            points.append(nm.find_root(lambda t: float(func(t)) - 0.5, (0.0, hi)))
        except NumericalError:
            pass
    if tau_grid is None:
        tau_grid = _tau_scan(inp.tau_max, 512)
    taus = np.union1d(np.asarray(tau_grid, dtype=float), points)
    vals = np.maximum.accumulate(np.asarray(func(taus), dtype=float))
    bm = float(vals[0]) if taus[0] == 0 else 0.0
    return ConfidenceDistribution(ParamGrid(taus), vals, bm, func=func)


# -------------------------------------------------------------- baselines


def inverse_variance(inp):
    """Fixed-effect pooled estimate and its variance ``1 / sum 1/sigma_j^2``."""
    inp = _as_input(inp)
    w = 1.0 / inp.sigma**2
    return float(np.sum(w * inp.y) / np.sum(w)), float(1.0 / np.sum(w))


def hksj_interval(inp, level: float = 0.95, tau: float | None = None):
    """Hartung-Knapp-Sidik-Jonkman interval around the random-effects mean.

    ``tau`` defaults to the REML estimate (DerSimonian-Laird if REML does not
    converge).  Returns ``(estimate, (lo, hi))``.
    """
    inp = _as_input(inp)
    inp.require(2)
    if tau is None:
        tau, _ = reml_tau(inp)
    w = 1.0 / (inp.sigma**2 + tau**2)
    est = float(np.sum(w * inp.y) / np.sum(w))
    var = float(np.sum(w * (inp.y - est) ** 2) / ((inp.k - 1) * np.sum(w)))
    half = float(nm.t_quantile(0.5 + level / 2.0, inp.k - 1)) * math.sqrt(var)
    return est, (est - half, est + half)


def sxs_combine(cds: Sequence[ConfidenceDistribution], weights: Sequence[float]) -> ConfidenceDistribution:
    """``Phi(sum_j w_j Phi^{-1}(C_j))`` on a common grid; requires ``sum w_j^2 = 1``."""
    cds = list(cds)
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(cds),):
        raise InputError("need one weight per CD")
    if abs(float(np.sum(w * w)) - 1.0) > 1e-9:
        raise InputError(f"weights must satisfy sum w^2 = 1 (got {np.sum(w * w):.12g})")
    g = cds[0].grid
    for cd in cds[1:]:
        if cd.grid.values.shape != g.values.shape or np.any(cd.grid.values != g.values):
            raise InputError("CDs must share a grid")
    z = np.zeros(len(g))
    with np.errstate(invalid="ignore"):
        for wj, cd in zip(w, cds):
            z = z + wj * nm.norm_quantile(np.clip(cd.values, 0.0, 1.0), strict=False)
    if np.any(np.isnan(z)):
        raise DegenerateDataError("sources are certain in opposite directions at some grid value")
    return ConfidenceDistribution(g, nm.norm_cdf(z))


def sxs_reml(inp, level: float = 0.95):
    """Normal-score combination with REML plug-in spread (closed form).

    Per-study CDs ``Phi((psi - y_j)/s_j)`` with ``s_j^2 = sigma_j^2 + tau_REML^2``
    and weights proportional to ``1/s_j`` combine to a normal CD centred at
    the weighted mean with standard deviation ``(sum 1/s_j^2)^{-1/2}``.
    Returns ``(estimate, (lo, hi))``.
    """
    inp = _as_input(inp)
    tau, _ = reml_tau(inp)
    w = 1.0 / (inp.sigma**2 + tau**2)
    est = float(np.sum(w * inp.y) / np.sum(w))
    half = float(nm.norm_quantile(0.5 + level / 2.0)) / math.sqrt(float(np.sum(w)))
    return est, (est - half, est + half)


# ------------------------------------------------------------------- files


def read_studies(path) -> NormalREInput:
    """Read ``estimate,stddev[,df]`` rows."""
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:2] != ["estimate", "stddev"] or len(header) > 3 or (len(header) == 3 and header[2] != "df"):
            raise InputError(f"{path}: expected header 'estimate,stddev[,df]', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                if len(row) != len(header):
                    raise ValueError("wrong number of fields")
                est, sd = float(row[0]), float(row[1])
                df = int(row[2]) if len(row) == 3 and row[2].strip() else None
                out.append(StudySummary(est, sd, df))
            except (ValueError, InputError) as exc:
                raise InputError(f"{path}: malformed row {lineno}: {','.join(row)!r} ({exc})") from None
    if not out:
        raise InputError(f"{path}: no studies")
    return NormalREInput(tuple(out))
