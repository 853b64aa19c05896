"""Combining information across sources with confidence distributions.

The workflow has three steps: build a confidence distribution or curve for
each source, convert each to a confidence log-likelihood, and fuse the
log-likelihoods into a profiled confidence curve for a focus parameter.
"""

from .curves import (
    ConfidenceCurve,
    ConfidenceDistribution,
    ConfidenceLogLik,
    ParamGrid,
    StudySummary,
    cc_from_cd,
    cc_from_deviance,
    cd_from_interval,
    deviance_from_loglik,
    median_cd,
    normal_cd,
    summarize,
    t_cd,
)
from .convert import chi2_convert, exact_convert, normal_convert
from .errors import (
    DegenerateDataError,
    IICCFFError,
    InputError,
    NumericalError,
    UndefinedEstimateError,
)

__version__ = "0.1.0"
