"""Monte-Carlo benchmark harness, gamma prototype and Neyman-Scott study."""

from .gamma import (
    confidence_risk,
    deviance_cdf_exact,
    gamma_cd,
    gamma_density_estimator,
    gamma_deviance,
    gamma_exact_cc,
    gamma_fused_cd,
    gamma_sxs_cd,
    risk_constant,
    simulate_gamma,
)
from .harness import (
    KINDS,
    THREADS_ENV,
    BenchmarkReport,
    MethodStats,
    Scenario,
    default_threads,
    load_scenario,
    run_benchmark,
)
from .neyman_scott import neyman_scott, ns_statistics, read_pairs, simulate_pairs

__all__ = [
    "KINDS",
    "THREADS_ENV",
    "BenchmarkReport",
    "MethodStats",
    "Scenario",
    "confidence_risk",
    "default_threads",
    "deviance_cdf_exact",
    "gamma_cd",
    "gamma_density_estimator",
    "gamma_deviance",
    "gamma_exact_cc",
    "gamma_fused_cd",
    "gamma_sxs_cd",
    "load_scenario",
    "neyman_scott",
    "ns_statistics",
    "read_pairs",
    "risk_constant",
    "run_benchmark",
    "simulate_gamma",
]
