"""Reverse Weibull (Type III extreme value) distribution: CDF, MLE fitting, K-S test.

Parameterisation: location ``a`` (finite right end-point), scale ``b > 0`` and
shape ``c > 0``, with CDF ``exp(-((a - y) / b) ** c)`` for ``y < a`` and 1 above.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-12
RESTARTS = 5
RESTART_SEED = 20171031
MAX_ITER = 2000
FATOL = 1e-10
# location offset above the sample maximum, as a fraction of the sample range
MIN_LOG_OFFSET = math.log(1e-9)
MAX_LOG_OFFSET = math.log(1e4)
INIT_OFFSET = 0.05
# Beyond this shape the Type III family is numerically its Gumbel limit and the
# likelihood keeps rising along a ridge with the location running off to the
# offset clamp; the end-point is then not identified by the fit.
SHAPE_CEILING = 1e3


@dataclass(frozen=True)
class ReverseWeibullParams:
    location: float
    scale: float
    shape: float

    def __post_init__(self):
        if not (self.scale > 0 and self.shape > 0):
            raise ValueError(f"scale and shape must be positive, got scale={self.scale}, shape={self.shape}")
        if not math.isfinite(self.location):
            raise ValueError("location must be finite")


@dataclass(frozen=True)
class FitResult:
    params: ReverseWeibullParams
    log_likelihood: float
    ks_statistic: float
    ks_pvalue: float
    n: int
    degenerate: bool = False
    regular: bool = True
    initial_log_likelihood: float = -math.inf
    restarts: int = 0
    sample_max: float = math.nan
    gumbel_limit: bool = False

    @property
    def location(self) -> float:
        return self.params.location

    @property
    def endpoint_estimate(self) -> float:
        """Fitted location, or the sample maximum when the fit hit the Gumbel limit."""
        return self.sample_max if self.gumbel_limit else self.params.location


def reverse_weibull_cdf(params: ReverseWeibullParams, y):
    y = np.asarray(y, dtype=np.float64)
    z = np.clip((params.location - y) / params.scale, 0.0, None)
    out = np.where(y >= params.location, 1.0, np.exp(-(z ** params.shape)))
    return float(out) if out.ndim == 0 else out


def reverse_weibull_logpdf(params: ReverseWeibullParams, y):
    y = np.asarray(y, dtype=np.float64)
    a, b, c = params.location, params.scale, params.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (a - y) / b
        out = np.where(
            y < a,
            math.log(c) - math.log(b) + (c - 1.0) * np.log(z) - z ** c,
            -np.inf,
        )
    return float(out) if out.ndim == 0 else out


def reverse_weibull_pdf(params: ReverseWeibullParams, y):
    return np.exp(reverse_weibull_logpdf(params, y))


def sample_reverse_weibull(params: ReverseWeibullParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draws."""
    u = rng.random(n)
    return params.location - params.scale * (-np.log1p(-u)) ** (1.0 / params.shape)


def log_likelihood(params: ReverseWeibullParams, samples) -> float:
    return float(np.sum(reverse_weibull_logpdf(params, np.asarray(samples, dtype=np.float64))))


def _values(samples) -> np.ndarray:
    values = getattr(samples, "values", samples)
    return np.asarray(values, dtype=np.float64).reshape(-1)


def _neg_loglik(theta: np.ndarray, u: np.ndarray) -> float:
    # u: samples mapped to max 0 and range 1; theta = (log offset, log scale, log shape)
    s = min(max(theta[0], MIN_LOG_OFFSET), MAX_LOG_OFFSET)
    log_b, log_c = theta[1], theta[2]
    if abs(log_b) > 50 or abs(log_c) > 10:
        return 1e300
    c = math.exp(log_c)
    z = (math.exp(s) - u) / math.exp(log_b)
    with np.errstate(over="ignore"):
        zc = z ** c
    nll = -(u.size * (log_c - log_b) + (c - 1.0) * np.sum(np.log(z)) - np.sum(zc))
    return nll if math.isfinite(nll) else 1e300


def _moment_guess(u: np.ndarray) -> np.ndarray:
    offset = INIT_OFFSET
    z = offset - u
    mean, std = float(z.mean()), float(z.std())
    c = min(max((std / mean) ** -1.086, 0.1), 50.0) if std > 0 else 1.0
    b = mean / math.gamma(1.0 + 1.0 / c)
    return np.array([math.log(offset), math.log(b), math.log(c)])


def fit_reverse_weibull_mle(samples, scale_floor: float = SCALE_FLOOR) -> FitResult:
    """Maximum-likelihood reverse Weibull fit constrained to ``location >= max(samples)``.

    The samples are mapped affinely to ``[-1, 0]`` before optimising, which
    makes the fit exactly equivariant under shifts and positive rescalings.
    The search runs Nelder-Mead from a moment-based start plus fixed-seed
    random restarts and keeps the best optimum.
    """
    y = _values(samples)
    n = y.size
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit, got {n}")
    if not np.all(np.isfinite(y)):
        raise ValueError("samples must be finite")
    top, spread = float(y.max()), float(y.max() - y.min())
    if spread == 0.0:
        params = ReverseWeibullParams(top, scale_floor, 1.0)
        d, pval = ks_test(y, params)
        return FitResult(params, math.inf, d, pval, n, degenerate=True, regular=False, sample_max=top)

    u = (y - top) / spread
    start = _moment_guess(u)
    init_nll = _neg_loglik(start, u)
    rng = np.random.default_rng(RESTART_SEED)
    starts = [start] + [start + rng.normal(0.0, 0.5, size=3) for _ in range(RESTARTS)]
    best = None
    for x0 in starts:
        res = optimize.minimize(
            _neg_loglik, x0, args=(u,), method="Nelder-Mead",
            options={"maxiter": MAX_ITER, "fatol": FATOL, "xatol": 1e-10},
        )
        if best is None or res.fun < best.fun:
            best = res
    s = min(max(best.x[0], MIN_LOG_OFFSET), MAX_LOG_OFFSET)
    shape = math.exp(best.x[2])
    params = ReverseWeibullParams(
        top + spread * math.exp(s),
        max(spread * math.exp(best.x[1]), scale_floor),
        shape,
    )
    # unit change of the density from the normalised samples
    jac = n * math.log(spread)
    d, pval = ks_test(y, params)
    if shape <= 1.0:
        log.debug("reverse Weibull fit is non-regular (shape %.3g <= 1)", shape)
    return FitResult(
        params,
        float(-best.fun - jac),
        d,
        pval,
        n,
        degenerate=False,
        regular=shape > 1.0,
        initial_log_likelihood=float(-init_nll - jac),
        restarts=len(starts),
        sample_max=top,
        gumbel_limit=shape > SHAPE_CEILING,
    )


def kolmogorov_pvalue(d: float, n: int) -> float:
    """Asymptotic Kolmogorov p-value with the usual small-sample correction."""
    sn = math.sqrt(n)
    return float(min(max(special.kolmogorov((sn + 0.12 + 0.11 / sn) * d), 0.0), 1.0))


def ks_test(samples, params: ReverseWeibullParams) -> tuple[float, float]:
    """One-sample K-S statistic ``D`` and p-value against the given reverse Weibull."""
    y = np.sort(_values(samples))
    n = y.size
    if n < 2:
        raise ValueError("K-S test needs at least 2 samples")
    cdf = reverse_weibull_cdf(params, y)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n), 0.0))
    d = min(d, 1.0)
    return d, kolmogorov_pvalue(d, n)
