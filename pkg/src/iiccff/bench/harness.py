"""Scenarios, data generators, method adapters and the replication loop."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .. import numerics as nm
from ..curves import ParamGrid, summarize
from ..errors import IICCFFError, InputError
from ..meta_normal import NormalREInput, hksj_interval, profile_psi0, sxs_reml
from ..meta_tables import (
    EffectMeasure,
    TwoByTwoTable,
    fused_cc_exact_or,
    mantel_haenszel,
    optimal_cd_common,
    random_effects_2x2,
    standard_iiccff,
)
from . import gamma as gm
from .neyman_scott import neyman_scott, simulate_pairs

__all__ = [
    "KINDS",
    "Scenario",
    "MethodStats",
    "BenchmarkReport",
    "run_benchmark",
    "load_scenario",
    "default_threads",
    "THREADS_ENV",
]

THREADS_ENV = "IICCFF_THREADS"
KINDS = ("basic-re", "fixed-2x2", "random-2x2", "gamma-proto", "neyman-scott")

_DEFAULTS = {
    "basic-re": dict(psi0=0.5, tau=0.09, k=10, m_range=[30, 50]),
    "fixed-2x2": dict(measure="OR", k=10, psi=None, p0_median=0.005, theta_var=0.5,
                      m1_range=[50, 150], ratio_range=[0.5, 1.5]),
    "random-2x2": dict(psi0=0.0, tau2=0.168, k=20, p0_median=0.2, theta_var=0.09, m1_range=[10, 50],
                       nodes=20, psi0_span=2.5, psi0_points=161),
    "gamma-proto": dict(theta=1.0, a=[1.5] * 20),
    "neyman-scott": dict(sigma=2.0, k=20, mu_range=[-3.0, 3.0]),
}
_METHODS = {
    "basic-re": ("standard", "corrected", "hksj", "sxs"),
    "fixed-2x2": ("standard", "exact", "optimal", "mh"),
    "random-2x2": ("standard", "corrected"),
    "gamma-proto": ("optimal", "exact-cc", "sxs", "density"),
    "neyman-scott": ("gold", "standard", "corrected"),
}
_EFFECT_DEFAULT = {EffectMeasure.OR: -1.5, EffectMeasure.RR: -1.5, EffectMeasure.RD: 0.05}


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"{THREADS_ENV} must be positive")
    return n


@dataclass
class Scenario:
    """One simulation design.

    ``params`` missing keys are filled from per-kind defaults; ``methods``
    defaults to every method available for the kind.
    """

    kind: str
    params: dict = field(default_factory=dict)
    reps: int = 1000
    seed: int = 0
    methods: Sequence[str] | None = None
    level: float = 0.95
    fair_drop: bool | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown scenario kind {self.kind!r}; choose from {KINDS}")
        if int(self.reps) < 100:
            raise InputError("a scenario needs at least 100 replications")
        if not 0 < self.level < 1:
            raise InputError("level must lie in (0, 1)")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise InputError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        p = {**_DEFAULTS[self.kind], **self.params}
        if self.kind == "fixed-2x2":
            m = EffectMeasure.parse(p["measure"])
            p["measure"] = m.name
            if p["psi"] is None:
                p["psi"] = _EFFECT_DEFAULT[m]
        self.params = p
        self.reps = int(self.reps)
        avail = _METHODS[self.kind]
        methods = tuple(self.methods) if self.methods else avail
        bad = [m for m in methods if m not in avail]
        if bad:
            raise InputError(f"unknown method(s) {bad} for {self.kind}; available: {list(avail)}")
        if self.kind == "fixed-2x2" and p["measure"] != "OR":
            # exact conversion and the optimal CD exist only for the odds ratio
            dropped = [m for m in methods if m in ("exact", "optimal")]
            if self.methods and dropped:
                raise InputError(f"method(s) {dropped} are available only for the odds ratio")
            methods = tuple(m for m in methods if m not in ("exact", "optimal"))
        self.methods = methods
        if self.fair_drop is None:
            self.fair_drop = self.kind == "fixed-2x2" and p["measure"] in ("OR", "RR")

    @property
    def truth(self) -> float:
        p = self.params
        return float({"basic-re": p.get("psi0"), "fixed-2x2": p.get("psi"), "random-2x2": p.get("psi0"),
                      "gamma-proto": p.get("theta"), "neyman-scott": p.get("sigma")}[self.kind])

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "params": self.params, "reps": self.reps,
                "seed": self.seed, "methods": list(self.methods), "level": self.level,
                "fair_drop": self.fair_drop}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        allowed = {"kind", "params", "reps", "seed", "methods", "level", "fair_drop", "name"}
        extra = set(d) - allowed
        if extra:
            raise InputError(f"unknown scenario fields {sorted(extra)}")
        if "kind" not in d:
            raise InputError("scenario needs a 'kind'")
        return cls(**d)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    d.setdefault("name", path.stem)
    return Scenario.from_dict(d)


# ------------------------------------------------------------------ generators


def _gen_basic_re(p, gen):
    k = p["k"]
    m = gen.integers(p["m_range"][0], p["m_range"][1], endpoint=True, size=k)
    psi = gen.normal(p["psi0"], p["tau"], size=k)
    y = gen.normal(psi, 2.0 / np.sqrt(m))
    s2 = 4.0 * gen.chisquare(m - 1) / ((m - 1) * m)
    return NormalREInput.from_arrays(y, np.sqrt(s2))


def _gen_fixed_2x2(p, gen):
    k = p["k"]
    theta = gen.normal(special.logit(p["p0_median"]), math.sqrt(p["theta_var"]), size=k)
    m1 = gen.integers(p["m1_range"][0], p["m1_range"][1], endpoint=True, size=k)
    r = gen.uniform(p["ratio_range"][0], p["ratio_range"][1], size=k)
    m0 = np.maximum(np.rint(r * m1), 1).astype(int)
    p0 = special.expit(theta)
    psi, meas = p["psi"], p["measure"]
    if meas == "OR":
        p1 = special.expit(theta + psi)
    elif meas == "RR":
        p1 = math.exp(psi) * p0
    else:
        p1 = psi + p0
    p1 = np.clip(p1, 0.0, 1.0)
    y1, y0 = gen.binomial(m1, p1), gen.binomial(m0, p0)
    return [TwoByTwoTable(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(y1, m1, y0, m0)]


def _gen_random_2x2(p, gen):
    k = p["k"]
    theta = gen.normal(special.logit(p["p0_median"]), math.sqrt(p["theta_var"]), size=k)
    m1 = gen.integers(p["m1_range"][0], p["m1_range"][1], endpoint=True, size=k)
    psi = gen.normal(p["psi0"], math.sqrt(p["tau2"]), size=k)
    y1 = gen.binomial(m1, special.expit(theta + psi))
    y0 = gen.binomial(m1, special.expit(theta))
    return [TwoByTwoTable(int(a), int(m), int(c), int(m)) for a, m, c in zip(y1, m1, y0)]


def _gen_gamma(p, gen):
    a = np.asarray(p["a"], dtype=float)
    return a, gm.simulate_gamma(a, p["theta"], gen)


def _gen_ns(p, gen):
    return simulate_pairs(p["k"], p["sigma"], gen, tuple(p["mu_range"]))


_GENERATORS = {"basic-re": _gen_basic_re, "fixed-2x2": _gen_fixed_2x2, "random-2x2": _gen_random_2x2,
               "gamma-proto": _gen_gamma, "neyman-scott": _gen_ns}


def _drop_round(sc: Scenario, data) -> bool:
    # MH (and normal-score combiners) are undefined without any control events
    return sc.kind == "fixed-2x2" and all(t.y0 == 0 for t in data)


# -------------------------------------------------------------------- methods


def _from_summary(s, est=None):
    lo, hi = s.interval
    if s.open_at_lo:
        lo = -math.inf
    if s.open_at_hi:
        hi = math.inf
    return (s.point_estimate if est is None else est), lo, hi


def _from_fusion(res, level):
    return _from_summary(res.summary(level), res.estimate)


def _from_cd(cd, level):
    a = (1.0 - level) / 2.0
    lo = -math.inf if cd.values[0] >= a else cd.quantile(a)
    hi = cd.quantile(1.0 - a)
    return cd.quantile(0.5), lo, hi


def _analyse_basic_re(sc, data, methods):
    lev = sc.level
    out = {}
    for m in methods:
        if m in ("standard", "corrected"):
            out[m] = lambda m=m: _from_fusion(profile_psi0(data, corrected=(m == "corrected"), levels=(lev,)), lev)
        elif m == "hksj":
            out[m] = lambda: (lambda e, iv: (e, *iv))(*hksj_interval(data, lev))
        else:
            out[m] = lambda: (lambda e, iv: (e, *iv))(*sxs_reml(data, lev))
    return out


def _analyse_fixed_2x2(sc, data, methods, rng):
    lev = sc.level
    meas = EffectMeasure.parse(sc.params["measure"])
    out = {}
    for m in methods:
        if m == "standard":
            out[m] = lambda: _from_fusion(standard_iiccff(data, meas, levels=(lev,)), lev)
        elif m == "exact":
            out[m] = lambda: _from_fusion(fused_cc_exact_or(data, levels=(lev,)), lev)
        elif m == "optimal":
            out[m] = lambda: _from_cd(optimal_cd_common(data, method="exact"), lev)
        else:
            out[m] = lambda: (lambda r: (r.estimate, *r.interval))(mantel_haenszel(data, meas, lev))
    return out


def _analyse_random_2x2(sc, data, methods):
    p, lev = sc.params, sc.level
    grid = ParamGrid.linspace(p["psi0"] - p["psi0_span"], p["psi0"] + p["psi0_span"], p["psi0_points"])
    cache = {}

    def both():
        if "r" not in cache:
            cache["r"] = random_effects_2x2(data, grid, levels=(lev,), nodes=p["nodes"], both=True)
        return cache["r"]

    idx = {"standard": 0, "corrected": 1}
    return {m: (lambda i=idx[m]: _from_fusion(both()[i], lev)) for m in methods}


def _med_first(lo_med_hi):
    lo, med, hi = (float(v) for v in lo_med_hi)
    return med, lo, hi


def _analyse_gamma(sc, data, methods, rng):
    a, y = data
    lev = sc.level
    q = ((1 - lev) / 2, 0.5, (1 + lev) / 2)
    a_dot, y_dot, k = a.sum(), y.sum(), a.size
    out = {}
    for m in methods:
        if m == "optimal":
            out[m] = lambda: _med_first(special.gammaincinv(a_dot, np.array(q)) / y_dot)
        elif m == "density":
            out[m] = lambda: _med_first(special.gammaincinv(a_dot - k + 1.0, np.array(q)) / y_dot)
        elif m == "sxs":
            def sxs():
                w = np.sqrt(a / a_dot)

                def cdf(theta):
                    c = special.gammainc(a, theta[:, None] * y)
                    return nm.norm_cdf(np.sum(w * special.ndtri(c), axis=-1))

                th = a_dot / y_dot
                u = np.array(q)
                return _med_first(gm._invert_cd(cdf, u, np.full(3, th * 1e-6), np.full(3, th * 1e6)))
            out[m] = sxs
        else:
            def exact():
                cc = gm.gamma_exact_cc(a, y, sims=20_000, rng=rng)
                return _from_summary(summarize(cc, lev), a_dot / y_dot)
            out[m] = exact
    return out


def _analyse_ns(sc, data, methods):
    lev = sc.level
    return {m: (lambda m=m: _from_summary(summarize(neyman_scott(data, m), lev))) for m in methods}


def _analysers(sc, data, rng) -> dict:
    if sc.kind == "basic-re":
        return _analyse_basic_re(sc, data, sc.methods)
    if sc.kind == "fixed-2x2":
        return _analyse_fixed_2x2(sc, data, sc.methods, rng)
    if sc.kind == "random-2x2":
        return _analyse_random_2x2(sc, data, sc.methods)
    if sc.kind == "gamma-proto":
        return _analyse_gamma(sc, data, sc.methods, rng)
    return _analyse_ns(sc, data, sc.methods)


def _extras(sc, data) -> dict:
    """Per-replication side measurements recorded next to the intervals."""
    if sc.kind == "neyman-scott":
        gold = neyman_scott(data, "gold")
        corr = neyman_scott(data, "corrected", gold.grid)
        return {"sup_corrected_vs_gold": float(np.max(np.abs(gold.values - corr.values)))}
    if sc.kind == "gamma-proto":
        a, y = data
        cc = abs(1.0 - 2.0 * special.gammainc(a.sum(), sc.params["theta"] * y.sum()))
        return {"cc_at_truth": float(cc)}
    return {}


# ------------------------------------------------------------------- reports


@dataclass(frozen=True)
class MethodStats:
    method: str
    coverage: float
    median_width: float
    median_bias: float
    successes: int
    failures: int
    drops: int
    infinite: int

    def as_row(self) -> dict:
        return {"method": self.method, "coverage": self.coverage, "median_width": self.median_width,
                "median_bias": self.median_bias, "successes": self.successes, "failures": self.failures,
                "drops": self.drops, "infinite": self.infinite}


@dataclass
class BenchmarkReport:
    scenario: Scenario
    stats: dict
    dropped: int
    extras: dict = field(default_factory=dict)
    replications: list | None = None

    def __getitem__(self, method: str) -> MethodStats:
        return self.stats[method]

    def coverage(self, method: str) -> float:
        return self.stats[method].coverage

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = list(MethodStats.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for st in self.stats.values():
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in st.as_row().items()})
        return buf.getvalue()

    def to_dict(self, dump: bool = False) -> dict:
        from ..fuse import _jsonable

        d = {"scenario": self.scenario.to_dict(), "dropped": self.dropped,
             "methods": {m: s.as_row() for m, s in self.stats.items()}, "extras": self.extras}
        if dump and self.replications is not None:
            d["replications"] = self.replications
        return _jsonable(d)

    def write(self, path, dump: bool = False, config: dict | None = None) -> tuple:
        """Write ``<path>.csv`` and ``<path>.json``; returns both paths."""
        base = Path(path)
        if base.suffix in (".csv", ".json"):
            base = base.with_suffix("")
        csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
        csv_path.write_text(self.to_csv())
        d = self.to_dict(dump)
        if config is not None:
            d["config"] = config
        json_path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _one_replication(sc: Scenario, rng: nm.RngStream, rep: int) -> dict:
    gen = rng.generator(rep)
    data = _GENERATORS[sc.kind](sc.params, gen)
    rec = {"rep": rep}
    if sc.fair_drop and _drop_round(sc, data):
        rec["dropped"] = True
        return rec
    rec["dropped"] = False
    for m, fn in _analysers(sc, data, rng.child(1 + rep)).items():
        try:
            est, lo, hi = (float(v) for v in fn())
            if math.isnan(est) or math.isnan(lo) or math.isnan(hi):
                raise ArithmeticError("NaN interval")
            rec[m] = {"estimate": est, "lo": lo, "hi": hi}
        except (IICCFFError, ArithmeticError, ValueError) as exc:
            rec[m] = {"error": f"{type(exc).__name__}: {exc}"}
    rec.update(_extras(sc, data))
    return rec


def _summarise(sc: Scenario, recs: list) -> BenchmarkReport:
    truth = sc.truth
    dropped = sum(r["dropped"] for r in recs)
    stats = {}
    for m in sc.methods:
        ok = [r[m] for r in recs if not r["dropped"] and "error" not in r[m]]
        fails = sum(1 for r in recs if not r["dropped"] and "error" in r[m])
        if ok:
            lo = np.array([o["lo"] for o in ok])
            hi = np.array([o["hi"] for o in ok])
            est = np.array([o["estimate"] for o in ok])
            cover = float(np.mean((lo <= truth) & (truth <= hi)))
            width = float(np.median(hi - lo))
            bias = float(np.median(est - truth))
            infinite = int(np.sum(~np.isfinite(hi - lo)))
        else:
            cover = width = bias = math.nan
            infinite = 0
        stats[m] = MethodStats(m, cover, width, bias, len(ok), fails, dropped, infinite)
    extras = {}
    keys = sorted({k for r in recs for k in r if k not in ("rep", "dropped") and k not in sc.methods})
    for key in keys:
        vals = np.array([r[key] for r in recs if key in r], dtype=float)
        extras[key] = {"median": float(np.median(vals)), "max": float(np.max(vals)), "mean": float(np.mean(vals))}
        if key == "cc_at_truth":
            from scipy import stats as sst

            extras[key]["ks_pvalue"] = float(sst.kstest(vals, "uniform").pvalue)
    extras["drop_fraction"] = dropped / sc.reps
    return BenchmarkReport(sc, stats, dropped, extras, recs)


def run_benchmark(scenario: Scenario, methods: Sequence[str] | None = None, rng: nm.RngStream | None = None,
                  threads: int | None = None, progress: Callable[[int], None] | None = None) -> BenchmarkReport:
    """Run ``scenario.reps`` replications and aggregate per-method statistics.

    Every replication draws its data from ``rng.generator(rep)`` (default
    stream: the scenario seed), so results do not depend on ``threads``.
    Method exceptions are recorded as failures for that method only.
    """
    sc = scenario
    if methods is not None:
        sc = Scenario(sc.kind, dict(sc.params), sc.reps, sc.seed, list(methods), sc.level, sc.fair_drop, sc.name)
    rng = rng or nm.RngStream(sc.seed)
    threads = default_threads() if threads is None else int(threads)
    if threads < 1:
        raise InputError("threads must be positive")
    reps = range(sc.reps)
    if threads == 1:
        recs = []
        for r in reps:
            recs.append(_one_replication(sc, rng, r))
            if progress:
                progress(r)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            recs = list(pool.map(lambda r: _one_replication(sc, rng, r), reps))
    return _summarise(sc, recs)
