import math

import numpy as np
import pytest

from iiccff import ParamGrid, StudySummary, cc_from_cd, cd_from_interval, chi2_convert, normal_cd
from iiccff.curves import ConfidenceLogLik
from iiccff.errors import InputError
from iiccff.fuse import (
    TAU_FLOOR,
    FocusMap,
    add_prior,
    cox_reid_generic,
    cox_reid_random,
    fuse_fixed,
    fuse_linked,
    fuse_random,
    fuse_weighted,
    fusion_result,
    parabola_focus,
    profile_random,
)
from iiccff.meta_normal import NormalREInput, _tau2_information, loglik_re


def quad_ll(centre, sd, grid):
    g = ParamGrid(grid) if not isinstance(grid, ParamGrid) else grid
    f = lambda x, c=centre, s=sd: -0.5 * ((np.asarray(x, dtype=float) - c) / s) ** 2  # noqa: E731
    return ConfidenceLogLik.from_values(g, f(g.values), f)


def test_fixed_inverse_variance():
    g = ParamGrid.linspace(-6, 6, 24001)
    lls = [quad_ll(1.0, 1.0, g), quad_ll(2.0, 2.0, g)]
    res = fuse_fixed(lls, None, g, levels=(0.95,))
    w = np.array([1.0, 0.25])
    est = (w @ [1.0, 2.0]) / w.sum()
    half = 1.959963984540054 / math.sqrt(w.sum())
    lo, hi = res.interval(0.95)
    assert abs(res.estimate - est) < 1e-6
    assert abs(lo - (est - half)) < 1e-6 and abs(hi - (est + half)) < 1e-6


def test_fixed_identical_sources_deviance():
    g = ParamGrid.linspace(-3, 3, 61)
    k = 4
    res = fuse_fixed([quad_ll(0.0, 1.0, g)] * k, FocusMap.common_parameter(k), g)
    assert np.allclose(res.deviance.values, k * g.values**2)


def test_fixed_dimension_mismatch():
    g = ParamGrid.linspace(-1, 1, 11)
    with pytest.raises(InputError):
        fuse_fixed([quad_ll(0, 1, g)], FocusMap.common_parameter(2), g)


def _whales_lls(whales):
    out = []
    for name in ("p1", "p2"):
        cd, _, _ = cd_from_interval(*whales[name])
        out.append(chi2_convert(cc_from_cd(cd)))
    return out


def _rho_map(with_complete=True):
    comp = (lambda rho, free: np.array([free[0], free[0] * (1.0 + 6.0 * rho)])) if with_complete else None
    return FocusMap(2, lambda p: (p[1] - p[0]) / (6.0 * p[0]), comp)


def test_whales_ratio_focus(whales):
    g = ParamGrid.linspace(-0.3, 1.2, 301)
    res = fuse_fixed(_whales_lls(whales), _rho_map(), g, levels=(0.95,))
    lo, hi = res.interval(0.95)
    assert abs(res.estimate - 0.026) < 0.003
    assert abs(lo + 0.094) < 0.01 and abs(hi - 0.454) < 0.01


def test_numeric_completion_matches_explicit(whales):
    g = ParamGrid.linspace(-0.2, 0.8, 41)
    a = fuse_fixed(_whales_lls(whales), _rho_map(True), g)
    b = fuse_fixed(_whales_lls(whales), _rho_map(False), g)
    assert np.max(np.abs(a.cc.values - b.cc.values)) < 1e-4


def test_whales_prior_narrows(whales):
    g = ParamGrid.linspace(-0.3, 1.2, 301)
    res = fuse_fixed(_whales_lls(whales), _rho_map(), g, levels=(0.95,))
    prior = lambda x: -0.5 * ((np.asarray(x) - 0.07) / 0.12) ** 2  # noqa: E731
    post = fusion_result(g, add_prior(res.loglik, prior).values, (0.95,))
    prior_cc = fusion_result(g, prior(g.values), (0.95,))
    w_data, w_prior, w_post = (r.summary(0.95).width for r in (res, prior_cc, post))
    assert w_post < w_data and w_post < w_prior
    # the combined curve sits between the two in location (it is sharper than both)
    assert min(res.estimate, 0.07) < post.estimate < max(res.estimate, 0.07)


def test_add_prior_flat_and_replica():
    g = ParamGrid.linspace(-3, 3, 61)
    ll = quad_ll(0.5, 1.0, g)
    assert np.allclose(add_prior(ll, lambda x: np.zeros_like(x)).values, ll.values)
    doubled = add_prior(ll, ll)
    assert np.allclose(-2 * doubled.values, 2 * (-2 * ll.values))


def test_fuse_weighted():
    g = ParamGrid.linspace(-4, 4, 161)
    a, b = quad_ll(-1.0, 1.0, g), quad_ll(2.0, 0.5, g)
    fixed = fuse_fixed([a, b], None, g)
    assert np.allclose(fuse_weighted([a, b], [1, 1]).values, fixed.loglik.values)
    assert np.allclose(fuse_weighted([a, b], [1, 0]).values, a.values)
    mix = fuse_weighted([a, b], [1, 0.2])
    assert a.argmax <= mix.argmax <= b.argmax
    with pytest.raises(InputError):
        fuse_weighted([a, b], [0, 0])


def test_parabola_focus_zero_slope():
    _, focus, complete = parabola_focus([0, 1, 2])
    assert focus(np.array([1.0, 0.0, -0.5])) == 0.0
    assert np.allclose(complete(3.0, [1.0, -0.5]), [1.0, 3.0, -0.5])


def test_fuse_linked_single_identity_source():
    g = ParamGrid.linspace(-3, 3, 121)
    ll = quad_ll(0.4, 0.7, g)
    res = fuse_linked([ll], [lambda b: b[0]], lambda b: b[0], lambda phi, free: np.array([phi]), g, start=[])
    src = fusion_result(g, ll.values)
    assert np.max(np.abs(res.cc.values - src.cc.values)) < 1e-9


def test_fuse_linked_parabola_recovery():
    x = np.linspace(0, 36, 10)
    mu = 1 + 0.4 * x - 0.01 * x**2
    gen = np.random.default_rng(5)
    obs = mu + gen.standard_normal(x.size)
    lls = [quad_ll(m, 1.0, np.linspace(m - 10, m + 10, 401)) for m in obs]
    links, focus, complete = parabola_focus(x)
    b = np.polyfit(x, obs, 2)[::-1]
    res = fuse_linked(lls, links, focus, complete, ParamGrid.linspace(5, 40, 141), start=[b[0], b[2]],
                      levels=(0.9,))
    # least-squares oracle
    assert abs(res.estimate - (-b[1] / (2 * b[2]))) < 0.3
    assert abs(res.estimate - 20.0) < 3.0


def _gauss_sources(y, s, grid):
    return [quad_ll(yj, sj, grid) for yj, sj in zip(y, s)]


def test_fuse_random_gaussian_closed_form():
    y, s = np.array([0.3, 1.1, -0.4]), np.array([0.5, 0.8, 0.6])
    g = ParamGrid.linspace(-1.5, 2.0, 36)
    taus = np.array([0.0, 0.2, 0.5, 1.0])
    surf = fuse_random(_gauss_sources(y, s, ParamGrid.linspace(-8, 8, 801)), g, taus)
    P, T = np.meshgrid(g.values, taus, indexing="ij")
    v = s**2 + T[..., None] ** 2
    # integrating exp(-(u-y)^2/(2 s^2)) against N(psi0, tau^2) gives s/sqrt(v) exp(-(y-psi0)^2/(2v))
    closed = np.sum(np.log(s) - 0.5 * np.log(v) - 0.5 * (y - P[..., None]) ** 2 / v, axis=-1)
    diff = surf.values - (closed - closed.max())
    assert np.max(np.abs(diff - diff.mean())) < 1e-4


def test_fuse_random_tau_zero_is_fixed():
    y, s = np.array([0.3, 1.1, -0.4]), np.array([0.5, 0.8, 0.6])
    fine = ParamGrid.linspace(-8, 8, 801)
    srcs = _gauss_sources(y, s, fine)
    g = ParamGrid.linspace(-1.5, 2.0, 36)
    surf = fuse_random(srcs, g, np.array([0.0, 0.5]))
    fixed = fuse_fixed(srcs, None, g)
    raw0 = surf.raw(g.values, np.zeros(len(g)))
    assert np.max(np.abs((raw0 - raw0.max()) - fixed.loglik.values)) < 1e-6


def test_fuse_random_matches_loglik_re():
    y, s = np.array([0.3, 1.1, -0.4, 0.9]), np.array([0.5, 0.8, 0.6, 0.4])
    g = ParamGrid.linspace(-1.0, 2.0, 13)
    surf = fuse_random(_gauss_sources(y, s, ParamGrid.linspace(-8, 8, 801)), g, np.array([0.0, 0.3, 0.7]))
    ref = loglik_re(NormalREInput.from_arrays(y, s), g.values[:, None], np.array([0.0, 0.3, 0.7])[None, :])
    d = surf.values - ref
    assert np.max(np.abs(d - d.mean())) < 1e-4


def test_cox_reid_random_guards():
    prof = -0.5 * np.linspace(-1, 1, 11) ** 2
    out, diag = cox_reid_random(prof, np.ones(11))
    assert np.allclose(out, prof) and diag["correction_skipped_points"] == 0
    th = np.full(11, 0.5)
    th[2] = TAU_FLOOR / 10
    out, diag = cox_reid_random(prof, th, guard="pointwise")
    assert diag["correction_skipped"] and diag["correction_skipped_points"] == 1
    assert out[2] == prof[2] and abs(out[3] - (prof[3] + math.log(0.5))) < 1e-15
    th[5] = 0.0
    out, diag = cox_reid_random(prof, th, guard="round")
    assert not diag["correction_applied"] and np.array_equal(out, prof)


def test_cox_reid_generic_neyman_scott_term():
    gen = np.random.default_rng(3)
    pairs = gen.normal(size=(8, 2)) * 1.5
    ss = 0.5 * (pairs[:, 0] - pairs[:, 1]) ** 2
    k = ss.size
    g = ParamGrid.linspace(0.6, 3.0, 25)

    # full per-pair likelihood in (sigma; mu_1..mu_k); lambda = mu
    def ll(sig, mu):
        return float(np.sum(-2 * np.log(sig) - ((pairs - mu[:, None]) ** 2).sum(axis=1) / (2 * sig * sig)))

    res = cox_reid_generic(ll, g, pairs.mean(axis=1))
    ref = -k * np.log(g.values) - 0.5 * ss.sum() / g.values**2
    assert np.max(np.abs(res.loglik.values - (ref - ref.max()))) < 1e-5


def test_cox_reid_generic_orthogonal_quadratic():
    g = ParamGrid.linspace(-3, 3, 31)
    res = cox_reid_generic(lambda p, lam: -0.5 * p * p - 0.5 * float(lam[0]) ** 2, g, [0.3])
    raw = cox_reid_generic(lambda p, lam: -0.5 * p * p - 0.5 * float(lam[0]) ** 2, g, [0.3], corrected=False)
    assert np.max(np.abs(res.cc.values - raw.cc.values)) < 1e-6


def test_cox_reid_generic_basic_re_tau2():
    y = np.array([-1.2, 0.4, 2.5, 1.1, -0.3, 3.0])
    s = np.array([0.4, 0.5, 0.3, 0.6, 0.5, 0.4])
    inp = NormalREInput.from_arrays(y, s)
    g = ParamGrid.linspace(0.0, 1.6, 17)
    res = cox_reid_generic(lambda p, lam: loglik_re(inp, p, math.sqrt(max(lam[0], 0.0))), g, [1.0],
                           lam_bounds=(0.0, 50.0))
    t2 = res.diagnostics["lambda_hat"][:, 0]
    assert np.all(t2 > 0.1)
    # analytic observed information for tau^2
    corr = -0.5 * np.log(_tau2_information(inp, g.values, np.sqrt(t2)))
    prof = loglik_re(inp, g.values, np.sqrt(t2))
    ref = prof + corr
    assert np.max(np.abs(res.loglik.values - (ref - ref.max()))) < 1e-5


def test_large_source_limit_matches_generic_tau_correction():
    # sigma_j -> 0: sources are nearly exact, so the random-effects surface is the normal likelihood of y
    y = np.array([-0.8, 0.1, 0.6, 1.4, 2.0])
    s = np.full(y.size, 1e-3)
    g = ParamGrid.linspace(-0.5, 1.7, 23)
    srcs = _gauss_sources(y, s, ParamGrid.linspace(-3, 4, 7001))
    surf = fuse_random(srcs, g, np.linspace(0, 3, 61) ** 1.0)
    rand = profile_random(surf, corrected=True)

    def ll(p, lam):
        t = float(lam[0])
        return float(np.sum(-np.log(t) - 0.5 * (y - p) ** 2 / t**2))

    gen = cox_reid_generic(ll, g, [1.0], lam_bounds=(0.05, 5.0))
    assert np.max(np.abs(rand.loglik.values - gen.loglik.values)) < 1e-4
