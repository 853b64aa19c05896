"""Neyman-Scott pairs: ``y_{1,j}, y_{2,j} ~ N(mu_j, sigma^2)``.

With ``S_j^2 = (y_{1,j} - y_{2,j})^2 / 2`` the statistic ``sum S_j^2 / sigma^2``
is chi-squared with ``k`` degrees of freedom, giving the exact CD
``1 - Gamma_k(sum S_j^2 / sigma^2)``.  Summing the per-pair profile
log-likelihoods ``-2 log sigma - S_j^2 / (2 sigma^2)`` gives an inconsistent
estimator (it converges to ``sigma / sqrt 2``); the Cox-Reid corrected
contributions ``-log sigma - S_j^2 / (2 sigma^2)`` fix this.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .. import numerics as nm
from ..curves import ConfidenceCurve, ConfidenceDistribution, ParamGrid, _as_grid
from ..errors import DegenerateDataError, InputError

__all__ = ["neyman_scott", "ns_statistics", "read_pairs", "simulate_pairs", "VARIANTS"]

VARIANTS = ("gold", "standard", "corrected")


def ns_statistics(pairs):
    """``(k, sum S_j^2)`` for a ``(k, 2)`` array of pairs."""
    y = np.asarray(pairs, dtype=float)
    if y.ndim != 2 or y.shape[1] != 2:
        raise InputError("pairs must be a (k, 2) array")
    k = y.shape[0]
    if k < 2:
        raise InputError("need at least two pairs")
    ss = float(np.sum(0.5 * (y[:, 0] - y[:, 1]) ** 2))
    if ss == 0:
        raise DegenerateDataError("all pairs are identical: sigma-hat is zero")
    return k, ss


def neyman_scott(pairs, variant: str = "corrected", grid=None) -> ConfidenceCurve:
    k, ss = ns_statistics(pairs)
    sig_hat = math.sqrt(ss / (2 * k))
    g = ParamGrid(np.geomspace(0.3 * sig_hat, 4.0 * sig_hat, 1024)) if grid is None else _as_grid(grid)
    s = g.values
    if g.lo <= 0:
        raise InputError("sigma grid must be positive")
    if variant == "gold":
        def func(sig):
            return 1.0 - nm.chi2_cdf(ss / np.asarray(sig, dtype=float) ** 2, k)

        cd = ConfidenceDistribution(g, func(s), func=func)
        return ConfidenceCurve(g, np.abs(1.0 - 2.0 * cd.values), 0.0, cd)
    if variant == "standard":
        ll = -2.0 * k * np.log(s) - 0.5 * ss / s**2
        top = -2.0 * k * math.log(sig_hat) - 0.5 * ss / sig_hat**2
    elif variant == "corrected":
        m = math.sqrt(ss / k)
        ll = -k * np.log(s) - 0.5 * ss / s**2
        top = -k * math.log(m) - 0.5 * ss / m**2
    else:
        raise InputError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    d = np.maximum(2.0 * (top - ll), 0.0)
    return ConfidenceCurve(g, nm.chi2_cdf(d, 1))


def simulate_pairs(k: int, sigma: float, gen: np.random.Generator, mu_range=(-3.0, 3.0)):
    mu = gen.uniform(mu_range[0], mu_range[1], size=k)
    return mu[:, None] + sigma * gen.standard_normal((k, 2))


def read_pairs(path) -> np.ndarray:
    """Read a ``y1,y2`` CSV of paired observations into a ``(k, 2)`` array."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["y1", "y2"]:
            raise InputError(f"{path}: expected header 'y1,y2', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                if len(row) != 2:
                    raise ValueError("wrong number of fields")
                rows.append((float(row[0]), float(row[1])))
            except ValueError as exc:
                raise InputError(f"{path}: malformed row {lineno}: {','.join(row)!r} ({exc})") from None
    if not rows:
        raise InputError(f"{path}: no pairs")
    return np.array(rows)
