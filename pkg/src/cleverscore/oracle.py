"""Reference estimators of the local cross Lipschitz constant of the margin.

* exact activation-region enumeration for one-hidden-layer ReLU networks,
* brute-force dense sampling for any network,
* the pairwise-slope (SLOPE) baseline with a reverse Weibull fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import linprog

from . import evt
from .net import Network, _check_classes, margin
from .sampling import (
    INF,
    Ball,
    GradNormSampleSet,
    SampleConfig,
    batch_rng,
    gradient_norms,
    lp_norm,
    sample_uniform_ball,
)

MAX_UNITS = 20
DENSE_CHUNK = 16384
# LP/SOCP slack thresholds, in units of distance to a hyperplane
FEASIBLE_SLACK = 1e-7
AMBIGUOUS_SLACK = 1e-6


class UnsupportedArchitectureError(ValueError):
    """The exact oracle only handles one hidden ReLU layer."""


class EnumerationBudgetError(ValueError):
    """Too many hidden units to enumerate every activation pattern."""


@dataclass
class RegionGradient:
    pattern: np.ndarray
    gradient: np.ndarray
    norm_q: float
    feasible_in_ball: bool | None = None


@dataclass
class LipschitzEstimate:
    value: float
    method: str
    certified: bool = False
    fit: evt.FitResult | None = None
    details: dict = field(default_factory=dict)


def region_bound(d: int, units: int) -> int:
    """Maximum number of regions cut out of ``R^d`` by ``units`` hyperplanes."""
    return sum(math.comb(units, i) for i in range(min(d, units) + 1))


def _one_hidden_relu(net: Network) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(net.layers) != 2 or net.layers[0].activation.kind != "relu":
        raise UnsupportedArchitectureError("exact oracle requires exactly one hidden ReLU layer")
    hidden, out = net.layers
    return hidden.weights, hidden.bias, out.weights


def _output_difference(v: np.ndarray, c: int, j: int) -> np.ndarray:
    seed = np.zeros(v.shape[0])
    seed[c] = 1.0
    seed[j] = -1.0
    return seed @ v


def activation_pattern(net: Network, xs: np.ndarray) -> np.ndarray:
    w, b, _ = _one_hidden_relu(net)
    return np.asarray(xs, dtype=np.float64) @ w.T + b > 0


def region_gradient(net: Network, c: int, j: int, pattern) -> np.ndarray:
    """Constant margin gradient on the region with the given on/off pattern."""
    w, _, v = _one_hidden_relu(net)
    coeff = _output_difference(v, c, j) * np.asarray(pattern, dtype=np.float64)
    return coeff @ w


def enumerate_region_gradients(net: Network, c: int, j: int, q: float = 2.0) -> list[RegionGradient]:
    """Gradient and its ``l_q`` norm for every one of the ``2^U`` activation patterns."""
    w, _, _ = _one_hidden_relu(net)
    _check_classes(net, c, j)
    units = w.shape[0]
    if units > MAX_UNITS:
        raise EnumerationBudgetError(f"{units} hidden units exceed the enumeration budget of {MAX_UNITS}")
    codes = np.arange(2 ** units)
    bits = ((codes[:, None] >> np.arange(units)) & 1).astype(bool)
    out = []
    for pattern in bits:
        grad = region_gradient(net, c, j, pattern)
        out.append(RegionGradient(pattern, grad, lp_norm(grad, q)))
    return out


# --- region feasibility --------------------------------------------------


def _signed_constraints(w: np.ndarray, b: np.ndarray, pattern: np.ndarray):
    """Rows ``a_r`` and offsets ``e_r`` so the open region is ``a_r x + e_r > 0``.

    Units with a zero weight row are constant; returns ``None`` when such a unit
    contradicts the pattern.
    """
    sign = np.where(pattern, 1.0, -1.0)
    norms = np.linalg.norm(w, axis=1)
    flat = norms == 0
    if np.any(flat):
        const_on = b[flat] > 0
        if np.any(const_on != pattern[flat]):
            return None
    keep = ~flat
    a = sign[keep, None] * w[keep] / norms[keep, None]
    e = sign[keep] * b[keep] / norms[keep]
    return a, e


def _max_slack_polytope(a: np.ndarray, e: np.ndarray, ball: Ball):
    # maximise t subject to a x + e >= t, x in the l1 or l_inf ball, t <= 1
    d = ball.dim
    m = a.shape[0]
    x0, r = ball.center, ball.radius
    if ball.p == INF:
        # variables (x, t)
        cost = np.zeros(d + 1)
        cost[-1] = -1.0
        a_ub = np.hstack([-a, np.ones((m, 1))])
        b_ub = e
        bounds = [(x0[i] - r, x0[i] + r) for i in range(d)] + [(None, 1.0)]
    else:
        # variables (x, s, t) with s >= |x - x0|, sum(s) <= r
        cost = np.zeros(2 * d + 1)
        cost[-1] = -1.0
        eye = np.eye(d)
        rows = [
            np.hstack([-a, np.zeros((m, d)), np.ones((m, 1))]),
            np.hstack([eye, -eye, np.zeros((d, 1))]),
            np.hstack([-eye, -eye, np.zeros((d, 1))]),
            np.hstack([np.zeros((1, d)), np.ones((1, d)), np.zeros((1, 1))]),
        ]
        a_ub = np.vstack(rows)
        b_ub = np.concatenate([e, x0, -x0, [r]])
        bounds = [(None, None)] * (2 * d) + [(None, 1.0)]
    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        # t is unbounded below, so the LP is always feasible: this is a solver failure
        return math.nan, None
    return -float(res.fun), res.x[:d]


@lru_cache(maxsize=64)
def _socp_problem(d: int, m: int):
    import cvxpy as cp

    x = cp.Variable(d)
    t = cp.Variable()
    a = cp.Parameter((m, d))
    e = cp.Parameter(m)
    x0 = cp.Parameter(d)
    r = cp.Parameter(nonneg=True)
    prob = cp.Problem(cp.Maximize(t), [a @ x + e >= t, cp.norm(x - x0, 2) <= r, t <= 1])
    return prob, x, a, e, x0, r


def _max_slack_l2(a: np.ndarray, e: np.ndarray, ball: Ball):
    import cvxpy as cp

    prob, x, pa, pe, px0, pr = _socp_problem(ball.dim, a.shape[0])
    pa.value, pe.value, px0.value, pr.value = a, e, ball.center, ball.radius
    try:
        prob.solve(solver="CLARABEL")
    except cp.error.SolverError:
        return math.nan, None
    if prob.status != "optimal":
        return math.nan, None
    return float(prob.value), np.array(x.value)


def region_slack(net: Network, pattern, ball: Ball) -> tuple[float, np.ndarray | None]:
    """Largest distance-to-boundary margin achievable inside the ball for ``pattern``.

    Positive slack means the open region meets the ball in a set of positive
    volume; the second item is the point attaining it. NaN means the solver
    failed.
    """
    w, b, _ = _one_hidden_relu(net)
    pattern = np.asarray(pattern, dtype=bool)
    cons = _signed_constraints(w, b, pattern)
    if cons is None:
        return -math.inf, None
    a, e = cons
    if a.shape[0] == 0:
        return 1.0, ball.center.copy()
    if ball.p == 2.0:
        return _max_slack_l2(a, e, ball)
    return _max_slack_polytope(a, e, ball)


def candidate_patterns(net: Network, ball: Ball) -> np.ndarray:
    """Activation patterns that can occur in the ball.

    A unit whose hyperplane is farther than the radius from the centre (in the
    ball's norm, i.e. ``|w x0 + b| / ||w||_q > R``) keeps its state at the
    centre throughout the ball; only the remaining units are enumerated.
    """
    w, b, _ = _one_hidden_relu(net)
    units = w.shape[0]
    if units > MAX_UNITS:
        raise EnumerationBudgetError(f"{units} hidden units exceed the enumeration budget of {MAX_UNITS}")
    pre = w @ ball.center + b
    dual = lp_norm(w, ball.q)
    with np.errstate(divide="ignore", invalid="ignore"):
        far = np.where(dual > 0, np.abs(pre) / dual > ball.radius, True)
    free = np.flatnonzero(~far)
    codes = np.arange(2 ** free.size)
    patterns = np.broadcast_to(pre > 0, (codes.size, units)).copy()
    patterns[:, free] = ((codes[:, None] >> np.arange(free.size)) & 1).astype(bool)
    return patterns


def exact_local_cross_lipschitz(net: Network, x0: np.ndarray, c: int, j: int, ball: Ball) -> LipschitzEstimate:
    """Max gradient norm over the activation regions that intersect the ball.

    Regions are checked in decreasing order of gradient norm and the first one
    that meets the ball gives the answer. A region whose feasibility is too
    close to call is counted as feasible and the result is marked uncertified.
    If the feasibility solver fails, the maximum over all candidate patterns
    is returned uncertified, which still bounds the local constant from above.
    """
    ball = Ball(x0, ball.radius, ball.p)
    _check_classes(net, c, j)
    patterns = candidate_patterns(net, ball)
    norms = np.array([lp_norm(region_gradient(net, c, j, pat), ball.q) for pat in patterns])
    order = np.argsort(-norms, kind="stable")
    checked = 0
    for i in order:
        pattern = patterns[i]
        slack, witness = region_slack(net, pattern, ball)
        checked += 1
        details = {"pattern": pattern, "slack": slack, "witness": witness, "checked": checked,
                   "candidates": len(patterns)}
        if math.isnan(slack):
            return LipschitzEstimate(float(norms[order[0]]), "exact", False,
                                     details={"solver_failure": True, "checked": checked,
                                              "candidates": len(patterns)})
        if slack > FEASIBLE_SLACK:
            return LipschitzEstimate(float(norms[i]), "exact", slack > AMBIGUOUS_SLACK, details=details)
        if slack > -AMBIGUOUS_SLACK:
            # too close to call; keep the conservative answer
            return LipschitzEstimate(float(norms[i]), "exact", False, details=details)
    raise RuntimeError("no activation region intersects the ball")  # pragma: no cover


# --- sampling-based estimators -------------------------------------------


def dense_sampling_lipschitz(
    net: Network,
    x0: np.ndarray,
    c: int,
    j: int,
    ball: Ball,
    n_dense: int,
    seed: int = 0,
) -> LipschitzEstimate:
    """Largest sampled ``||grad g||_q`` over ``n_dense`` uniform ball points.

    Points come in fixed chunks from per-chunk streams, so a larger
    ``n_dense`` with the same seed extends the same sample sequence.
    """
    if n_dense < 1:
        raise ValueError("n_dense must be at least 1")
    ball = Ball(x0, ball.radius, ball.p)
    best = 0.0
    for k, start in enumerate(range(0, n_dense, DENSE_CHUNK)):
        xs = sample_uniform_ball(ball, DENSE_CHUNK, batch_rng(seed, k))[: n_dense - start]
        best = max(best, float(gradient_norms(net, xs, c, j, ball.q).max()))
    return LipschitzEstimate(best, "dense", False, details={"n_dense": n_dense})


def pair_slopes(net: Network, c: int, j: int, ball: Ball, n: int, rng: np.random.Generator) -> np.ndarray:
    """``|g(x) - g(y)| / ||x - y||_p`` for ``n`` independent uniform pairs in the ball."""
    xs = sample_uniform_ball(ball, n, rng)
    ys = sample_uniform_ball(ball, n, rng)
    dist = lp_norm(xs - ys, ball.p)
    while np.any(dist == 0):
        bad = dist == 0
        ys[bad] = sample_uniform_ball(ball, int(bad.sum()), rng)
        dist = lp_norm(xs - ys, ball.p)
    return np.abs(margin(net, xs, c, j) - margin(net, ys, c, j)) / dist


def slope_estimate(
    net: Network,
    x0: np.ndarray,
    c: int,
    j: int,
    ball: Ball,
    cfg: SampleConfig,
) -> LipschitzEstimate:
    """SLOPE baseline: reverse Weibull location fitted to per-batch maxima of pairwise slopes."""
    if cfg.n_per_batch < 2:
        raise ValueError("SLOPE needs at least 2 pairs per batch")
    ball = Ball(x0, ball.radius, ball.p)
    maxima = np.array([pair_slopes(net, c, j, ball, cfg.n_per_batch, batch_rng(cfg.seed, i)).max()
                       for i in range(cfg.n_batches)])
    samples = GradNormSampleSet(maxima, ball.q, j, "slope")
    fit = evt.fit_reverse_weibull_mle(samples)
    return LipschitzEstimate(fit.endpoint_estimate, "slope", False, fit=fit, details={"samples": samples})


def empirical_gradnorm_cdf(
    net: Network,
    x0: np.ndarray,
    c: int,
    j: int,
    ball: Ball,
    n: int,
    seed: int = 0,
) -> list[tuple[float, float]]:
    """Empirical CDF of ``||grad g||_q`` as ``(value, P[Y <= value])`` steps.

    On one-hidden-layer ReLU networks each sample is mapped to its activation
    pattern and valued with :func:`region_gradient`, so the observed values are
    exactly the enumerated region norms.
    """
    ball = Ball(x0, ball.radius, ball.p)
    xs = sample_uniform_ball(ball, n, np.random.default_rng(seed))
    try:
        _one_hidden_relu(net)
    except UnsupportedArchitectureError:
        norms = gradient_norms(net, xs, c, j, ball.q)
    else:
        _check_classes(net, c, j)
        patterns, inverse = np.unique(activation_pattern(net, xs), axis=0, return_inverse=True)
        per_pattern = np.array([lp_norm(region_gradient(net, c, j, pat), ball.q) for pat in patterns])
        norms = per_pattern[np.asarray(inverse).reshape(-1)]
    values, counts = np.unique(norms, return_counts=True)
    return list(zip(values.tolist(), (np.cumsum(counts) / n).tolist()))


def sampled_patterns(net: Network, x0: np.ndarray, ball: Ball, n: int, seed: int = 0) -> np.ndarray:
    """Distinct activation patterns hit by ``n`` uniform ball samples."""
    ball = Ball(x0, ball.radius, ball.p)
    xs = sample_uniform_ball(ball, n, np.random.default_rng(seed))
    return np.unique(activation_pattern(net, xs), axis=0)

