import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from iiccff import (
    ConfidenceCurve,
    ConfidenceDistribution,
    ParamGrid,
    StudySummary,
    cc_from_cd,
    cc_from_deviance,
    chi2_convert,
    exact_convert,
    normal_cd,
    normal_convert,
    t_cd,
)
from iiccff import numerics as nm
from iiccff.curves import Deviance
from iiccff.errors import InputError


def test_chi2_convert_values():
    g = ParamGrid([0.0, 1.0, 2.0])
    ll = chi2_convert(ConfidenceCurve(g, [0.95, 0.0, 1.0]))
    assert ll.values[1] == 0.0
    assert abs(ll.values[0] + 0.5 * stats.chi2.ppf(0.95, 1)) < 1e-12
    assert abs(ll.values[0] + 1.9207) < 1e-3
    assert ll.values[2] == -math.inf


@given(st.lists(st.floats(min_value=0.0, max_value=20.0), min_size=2, max_size=30))
@settings(max_examples=200, deadline=None)
def test_chi2_roundtrip(devs):
    d = np.array(devs)
    d[0] = 0.0
    g = ParamGrid(np.arange(d.size, dtype=float))
    ll = chi2_convert(cc_from_deviance(Deviance(g, d)))
    assert np.max(np.abs(ll.values + 0.5 * d)) < 1e-9


def test_normal_convert():
    g = ParamGrid([0.0, 1.0])
    ll = normal_convert(ConfidenceDistribution(g, [0.5, 0.975]))
    assert ll.values[0] == 0.0
    assert abs(ll.values[1] + 0.5 * stats.norm.ppf(0.975) ** 2) < 1e-12
    assert abs(ll.values[1] + 1.9208) < 1e-3
    cd = normal_cd(StudySummary(0.0, 1.0), ParamGrid.linspace(-5, 5, 201))
    ll = normal_convert(cd)
    assert np.max(np.abs(ll.values + 0.5 * cd.grid.values**2)) < 1e-9


def test_normal_and_chi2_agree_for_cc_from_cd():
    cd = normal_cd(StudySummary(1.0, 2.0))
    a = normal_convert(cd).values
    b = chi2_convert(cc_from_cd(cd)).values
    fin = np.isfinite(a)
    assert np.array_equal(fin, np.isfinite(b))
    # |1 - 2C| loses relative precision far in the tails
    assert np.max(np.abs(a[fin] - b[fin])) < 1e-7


def test_chi2_convert_offgrid_evaluation():
    cd = normal_cd(StudySummary(0.0, 1.0))
    ll = chi2_convert(cc_from_cd(cd))
    # normalisation is to the grid maximum, so compare differences
    x = np.array([0.123456, -1.7, 2.345678])
    v = ll(x)
    assert np.max(np.abs((v - v[0]) + 0.5 * (x**2 - x[0] ** 2))) < 1e-9


def test_exact_convert_normal_location():
    g = ParamGrid.linspace(-4, 4, 161)
    ll = exact_convert(lambda psi, t: nm.norm_cdf(psi - t), 0.0, g)
    assert np.max(np.abs(ll.values + 0.5 * g.values**2)) < 1e-5


def test_exact_convert_gamma_scale():
    from scipy import special

    g = ParamGrid.linspace(0.2, 8.0, 157)
    ll = exact_convert(lambda th, y: special.gammainc(2.0, th * y), 1.0, g)
    # d/dy G(theta y, 2) = theta^2 y e^{-theta y}: at y = 1 the log-likelihood 2 log theta - theta
    ref = 2 * np.log(g.values) - g.values
    ref -= ref.max()
    assert np.max(np.abs(ll.values - ref)) < 1e-5


def test_exact_convert_rejects_non_monotone_family():
    g = ParamGrid.linspace(-2, 2, 41)
    with pytest.raises(InputError):
        exact_convert(lambda psi, t: 0.5 + 0.1 * np.sin(psi * t * 5), 1.0, g)


def _t_conversion_gap(df, half_width):
    g = ParamGrid.linspace(-half_width, half_width, 201)
    normal = normal_convert(t_cd(StudySummary(0.0, 1.0, df), g)).values
    # the t density is the exact likelihood for the location family
    exact = exact_convert(lambda psi, t: 1.0 - nm.t_cdf(t - psi, df), 0.0, g).values
    return np.max(np.abs(normal - exact))


def test_t_cd_normal_conversion_gap_shrinks_with_df():
    assert _t_conversion_gap(3, 1.0) > 0.1
    assert _t_conversion_gap(200, 0.5) < 1e-3
    gaps = [_t_conversion_gap(df, 2.0) for df in (3, 10, 30, 100, 200)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    # leading-order decay is 1/df
    assert _t_conversion_gap(200, 2.0) * 200 < 1.2 * _t_conversion_gap(100, 2.0) * 100
