"""Uniform sampling in l_p balls and collection of per-batch gradient-norm maxima."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .net import Network, margin_grads

INF = math.inf
SUPPORTED_P = (1.0, 2.0, INF)

# Rows per gradient evaluation; fixed so results never depend on the caller.
CHUNK_ROWS = 16384


class NumericError(ArithmeticError):
    """A gradient or margin evaluated to a non-finite value."""


def parse_p(p) -> float:
    """Normalise a norm order given as ``1``, ``2``, ``inf``, ``"inf"`` etc."""
    if isinstance(p, str):
        key = p.strip().lower()
        if key in ("inf", "infinity", "linf", "max"):
            return INF
        p = float(key)
    p = float(p)
    if p not in SUPPORTED_P:
        raise ValueError(f"unsupported norm order p={p}; supported orders are 1, 2 and inf")
    return p


def p_label(p: float) -> str:
    return "inf" if p == INF else str(int(p))


def dual_exponent(p) -> float:
    """Hölder conjugate ``q`` with ``1/p + 1/q = 1``."""
    p = parse_p(p)
    if p == 1.0:
        return INF
    if p == INF:
        return 1.0
    return p / (p - 1.0)


def lp_norm(v: np.ndarray, p, axis: int = -1) -> np.ndarray | float:
    p = parse_p(p)
    v = np.asarray(v, dtype=np.float64)
    if p == INF:
        out = np.abs(v).max(axis=axis)
    elif p == 1.0:
        out = np.abs(v).sum(axis=axis)
    else:
        out = np.sqrt(np.einsum("...i,...i->...", v, v)) if axis in (-1, v.ndim - 1) else np.sqrt((v * v).sum(axis=axis))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float
    p: float = 2.0

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(c)):
            raise ValueError("ball center must be finite")
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError(f"ball radius must be positive and finite, got {self.radius}")
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "p", parse_p(self.p))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def q(self) -> float:
        return dual_exponent(self.p)

    def contains(self, xs: np.ndarray) -> np.ndarray:
        return lp_norm(np.asarray(xs) - self.center, self.p) <= self.radius


@dataclass(frozen=True)
class SampleConfig:
    n_batches: int = 500
    n_per_batch: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.n_batches < 2:
            raise ValueError("n_batches must be at least 2 to fit an extreme-value distribution")
        if self.n_per_batch < 1:
            raise ValueError("n_per_batch must be at least 1")


@dataclass
class GradNormSampleSet:
    values: np.ndarray
    q: float
    target_j: int
    source: str = "gradnorm"
    # per-batch raw norms, only kept when requested
    batches: list[np.ndarray] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.values)


def batch_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for batch ``index`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def _unit_directions(rng: np.random.Generator, n: int, d: int, p: float) -> np.ndarray:
    if p == 2.0:
        g = rng.standard_normal((n, d))
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    # p = 1: signed exponentials normalised by their l1 norm are uniform on the l1 sphere
    e = rng.standard_exponential((n, d)) * rng.choice(np.array([-1.0, 1.0]), size=(n, d))
    return e / np.abs(e).sum(axis=1, keepdims=True)


def sample_offsets(d: int, radius: float, p: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` offsets uniform in the origin-centred ``l_p`` ball of the given radius."""
    if n < 1:
        raise ValueError("need at least one sample")
    if p == INF:
        return rng.uniform(-radius, radius, size=(n, d))
    directions = _unit_directions(rng, n, d, p)
    r = radius * rng.random(n) ** (1.0 / d)
    return directions * r[:, None]


def sample_uniform_ball(ball: Ball, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. points uniform over the volume of ``ball``; every point is inside it."""
    xs = ball.center + sample_offsets(ball.dim, ball.radius, ball.p, n, rng)
    return _enforce_membership(xs, ball)


def _enforce_membership(xs: np.ndarray, ball: Ball) -> np.ndarray:
    # rounding in center + offset can push a boundary point a few ulps outside
    outside = ~ball.contains(xs)
    shrink = 1.0
    while np.any(outside):
        shrink *= 1.0 - 1e-12
        xs[outside] = ball.center + (xs[outside] - ball.center) * shrink
        outside = ~ball.contains(xs)
    return xs


def gradient_norms(net: Network, xs: np.ndarray, c: int, j: int, q: float) -> np.ndarray:
    out = np.empty(len(xs))
    # overflow is reported by the caller as a non-finite norm
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, len(xs), CHUNK_ROWS):
            _, grads = margin_grads(net, xs[start:start + CHUNK_ROWS], c, j)
            out[start:start + CHUNK_ROWS] = lp_norm(grads, q)
    return out


def collect_batch_maxima(
    net: Network,
    x0: np.ndarray,
    c: int,
    j: int,
    ball: Ball,
    cfg: SampleConfig,
    keep_batches: bool = False,
    start: int = 0,
) -> GradNormSampleSet:
    """Max of ``||grad g||_q`` over each of ``cfg.n_batches`` batches of ball samples.

    Batch ``i`` draws from ``batch_rng(cfg.seed, i)``, so the result does not
    depend on evaluation order. ``start`` skips the first batches, which lets a
    caller extend an earlier, shorter run.
    """
    if not 0 <= start < cfg.n_batches:
        raise ValueError(f"start must lie in [0, {cfg.n_batches}), got {start}")
    if not np.array_equal(np.asarray(x0, dtype=np.float64), ball.center):
        ball = Ball(x0, ball.radius, ball.p)
    q = ball.q
    maxima = np.empty(cfg.n_batches - start)
    kept = [] if keep_batches else None
    per_chunk = max(1, CHUNK_ROWS // cfg.n_per_batch)
    for first in range(start, cfg.n_batches, per_chunk):
        idx = range(first, min(first + per_chunk, cfg.n_batches))
        xs = np.concatenate([sample_uniform_ball(ball, cfg.n_per_batch, batch_rng(cfg.seed, i)) for i in idx])
        norms = gradient_norms(net, xs, c, j, q)
        bad = np.flatnonzero(~np.isfinite(norms))
        if bad.size:
            k = int(bad[0])
            raise NumericError(
                f"non-finite gradient at batch {first + k // cfg.n_per_batch}, sample {k % cfg.n_per_batch}")
        norms = norms.reshape(len(idx), cfg.n_per_batch)
        maxima[first - start:first - start + len(idx)] = norms.max(axis=1)
        if kept is not None:
            kept.extend(norms)
    return GradNormSampleSet(maxima, q, j, "gradnorm", kept)
