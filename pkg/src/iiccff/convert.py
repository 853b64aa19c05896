"""Confidence conversion: from CDs and confidence curves to log-likelihoods.

Three recipes are offered:

* :func:`chi2_convert` inverts the Wilks relation, ``l = -1/2 Gamma_1^{-1}(cc)``;
* :func:`normal_convert` uses ``l = -1/2 {Phi^{-1}(C)}^2`` (equivalent to the
  above when the curve came from ``cc = |1 - 2C|``);
* :func:`exact_convert` takes ``l = log |dC(psi, t)/dt|`` at the observed
  statistic, which recovers the likelihood when ``C`` is the exact c.d.f. of
  the statistic.

Curve values indistinguishable from full confidence (``cc >= 1 - 1e-12``)
are mapped to ``-inf``: they mark parameter values the source excludes,
and fusion treats them as hard exclusions rather than inventing tail shape.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nm
from .curves import ConfidenceCurve, ConfidenceDistribution, ConfidenceLogLik, _as_grid
from .errors import InputError, NumericalError

__all__ = ["chi2_convert", "normal_convert", "exact_convert", "FULL_CONFIDENCE"]

FULL_CONFIDENCE = 1.0 - 1e-12


def _ll_from_cc(v):
    v = np.asarray(v, dtype=float)
    shape = v.shape
    v = v.reshape(-1)
    out = np.full(v.shape, -np.inf)
    ok = v < FULL_CONFIDENCE
    out[ok] = -0.5 * nm.chi2_quantile(v[ok], 1)
    return out.reshape(shape) if shape else float(out[0])


def _ll_from_cd(c):
    c = np.asarray(c, dtype=float)
    shape = c.shape
    c = c.reshape(-1)
    out = np.full(c.shape, -np.inf)
    # same exclusion rule as chi2_convert: |1 - 2C| >= 1 - 1e-12
    ok = np.abs(1.0 - 2.0 * c) < FULL_CONFIDENCE
    z = nm.norm_quantile(c[ok])
    out[ok] = -0.5 * z * z
    return out.reshape(shape) if shape else float(out[0])


def chi2_convert(cc: ConfidenceCurve) -> ConfidenceLogLik:
    """``-1/2`` times the chi-squared(1) quantile of the curve, pointwise.

    When the curve was built from a CD with an exact evaluator, the result
    can also be evaluated off-grid.
    """
    func = None
    if cc.cd is not None and cc.cd.func is not None:
        cdf = cc.cd.func

        def func(x):
            return _ll_from_cc(np.abs(1.0 - 2.0 * np.asarray(cdf(x))))

    return ConfidenceLogLik.from_values(cc.grid, _ll_from_cc(cc.values), func)


def normal_convert(cd: ConfidenceDistribution) -> ConfidenceLogLik:
    func = None
    if cd.func is not None:
        cdf = cd.func

        def func(x):
            return _ll_from_cd(cdf(x))

    return ConfidenceLogLik.from_values(cd.grid, _ll_from_cd(cd.values), func)


def exact_convert(cd_family: Callable, t_obs: float, grid) -> ConfidenceLogLik:
    """``log |dC(psi, t)/dt|`` at ``t = t_obs`` by central differences.

    ``cd_family(psi_array, t)`` must return the CD values on the array.  The
    derivative must keep one sign across the grid (a CD is monotone in the
    statistic); values where it vanishes numerically are flagged ``-inf``.
    """
    g = _as_grid(grid)
    h = max(1e-6, 1e-6 * abs(t_obs))
    psi = g.values
    up = np.asarray(cd_family(psi, t_obs + h), dtype=float)
    dn = np.asarray(cd_family(psi, t_obs - h), dtype=float)
    deriv = (up - dn) / (2.0 * h)
    if not np.all(np.isfinite(deriv)):
        raise NumericalError("CD family returned non-finite values near t_obs")
    if np.any(deriv > 0) and np.any(deriv < 0):
        raise InputError("CD is not monotone in the statistic: derivative changes sign on the grid")
    with np.errstate(divide="ignore"):
        ll = np.log(np.abs(deriv))
    if not np.any(np.isfinite(ll)):
        raise InputError("CD derivative vanishes on the whole grid")
    return ConfidenceLogLik.from_values(g, ll)
