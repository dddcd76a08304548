"""Gradient attacks that produce upper bounds on the minimum adversarial distortion.

``ifgsm`` is the iterative fast gradient sign method under an l_inf budget,
``margin_descent_l2`` a simplified Carlini-Wagner style l_2 attack, and
``verify_bounds`` compares lower-bound scores with the distortions found.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .net import Network, _forward_cached, _margin_backward, forward, margin_and_grad
from .sampling import INF, lp_norm, parse_p

DEFAULT_EPS = (0.01, 0.025, 0.05, 0.1, 0.3, 0.5, 0.8, 1.0)


class AlignmentError(ValueError):
    """Scores and attack outcomes do not pair up."""


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = 50
    eps_list: tuple[float, ...] = DEFAULT_EPS
    step_fraction: float = 0.1
    l2_steps: int = 1000
    l2_lr: float = 0.005
    lambda_search_steps: int = 9
    lambda_range: tuple[float, float] = (1e-3, 1e3)
    input_box: tuple[float, float] | None = None

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        object.__setattr__(self, "eps_list", eps)
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps_list must be strictly increasing")
        if any(e <= 0 for e in eps):
            raise ValueError("eps_list entries must be positive")


@dataclass
class AttackOutcome:
    adversarial_x: np.ndarray
    delta: np.ndarray
    success: bool
    distortion_l2: float
    distortion_linf: float
    distortion_l1: float
    target_j: int | None
    method: str
    eps: float | None = None
    lam: float | None = None

    def distortion(self, p) -> float:
        p = parse_p(p)
        if p == INF:
            return self.distortion_linf
        return self.distortion_l2 if p == 2.0 else self.distortion_l1


def _outcome(net: Network, x0, x, c, target, method, **extra) -> AttackOutcome:
    delta = x - x0
    return AttackOutcome(
        adversarial_x=x,
        delta=delta,
        success=_succeeded(net, x, c, target),
        distortion_l2=lp_norm(delta, 2),
        distortion_linf=lp_norm(delta, INF),
        distortion_l1=lp_norm(delta, 1),
        target_j=target,
        method=method,
        **extra,
    )


def _succeeded(net: Network, x: np.ndarray, c: int, target: int | None) -> bool:
    pred = int(np.argmax(forward(net, x)))
    return pred == target if target is not None else pred != c


def _runner_up(net: Network, x: np.ndarray, c: int) -> int:
    logits = forward(net, x).copy()
    logits[c] = -np.inf
    return int(np.argmax(logits))


def _project_linf(x: np.ndarray, x0: np.ndarray, eps: float, box) -> np.ndarray:
    x = np.clip(x, x0 - eps, x0 + eps)
    if box is not None:
        x = np.clip(x, box[0], box[1])
    # rounding in x0 +/- eps can leave |x - x0| one ulp above eps
    over = np.abs(x - x0) > eps
    while np.any(over):
        x[over] = np.nextafter(x[over], x0[over])
        over = np.abs(x - x0) > eps
    return x


def ifgsm(
    net: Network,
    x0: np.ndarray,
    c: int,
    target: int | None,
    eps: float,
    cfg: AttackConfig = AttackConfig(),
) -> AttackOutcome:
    """I-FGSM with step ``eps * step_fraction``, stopping at the first success.

    Targeted runs push the margin ``f_c - f_target`` down; untargeted runs
    attack whichever class is currently the runner-up.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x = x0.copy()
    alpha = eps * cfg.step_fraction
    if eps > 0:
        for _ in range(cfg.iterations):
            if _succeeded(net, x, c, target):
                break
            j = target if target is not None else _runner_up(net, x, c)
            grad = margin_and_grad(net, x, c, j).gradient
            x = _project_linf(x - alpha * np.sign(grad), x0, eps, cfg.input_box)
    return _outcome(net, x0, x, c, target, "ifgsm", eps=eps)


def ifgsm_best_eps(
    net: Network,
    x0: np.ndarray,
    c: int,
    target: int | None,
    cfg: AttackConfig = AttackConfig(),
) -> AttackOutcome:
    """Smallest budget in ``cfg.eps_list`` that succeeds, else the largest failed run."""
    if not cfg.eps_list:
        raise ValueError("eps_list is empty")
    out = None
    for eps in cfg.eps_list:
        out = ifgsm(net, x0, c, target, eps, cfg)
        if out.success:
            break
    return out


def _descend(net, x0, c, target, lam, cfg) -> tuple[np.ndarray | None, float]:
    delta = np.zeros_like(x0)
    best_x, best_dist = None, math.inf
    box = cfg.input_box
    for _ in range(cfg.l2_steps + 1):
        x = x0 + delta
        if box is not None:
            x = np.clip(x, box[0], box[1])
        # one forward pass serves the success test, the runner-up and the gradient
        logits, pre = _forward_cached(net, x)
        pred = int(np.argmax(logits))
        if (pred == target) if target is not None else (pred != c):
            dist = lp_norm(x - x0, 2)
            if dist < best_dist:
                best_x, best_dist = x, dist
        if target is not None:
            j = target
        else:
            masked = logits.copy()
            masked[c] = -np.inf
            j = int(np.argmax(masked))
        step = 2.0 * delta
        if logits[c] - logits[j] > 0:
            step = step + lam * _margin_backward(net, pre, x.shape, c, j)
        delta = delta - cfg.l2_lr * step
    return best_x, best_dist


def margin_descent_l2(
    net: Network,
    x0: np.ndarray,
    c: int,
    target: int | None,
    cfg: AttackConfig = AttackConfig(),
    bisect: bool = True,
) -> AttackOutcome:
    """Minimise ``||delta||^2 + lam * max(g(x0 + delta), 0)`` by gradient descent.

    ``lam`` is bisected geometrically between the largest failing and
    smallest succeeding value; the smallest successful distortion seen over
    all runs is returned. With ``bisect=False`` only the upper end of the
    range is tried.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    lo, hi = cfg.lambda_range
    best_x, best_dist = _descend(net, x0, c, target, hi, cfg)
    best_lam = hi
    if best_x is None:
        return _outcome(net, x0, x0.copy(), c, target, "margin_l2", lam=hi)
    if bisect:
        for _ in range(cfg.lambda_search_steps):
            mid = math.sqrt(lo * hi)
            x, dist = _descend(net, x0, c, target, mid, cfg)
            if x is None:
                lo = mid
                continue
            hi = mid
            if dist < best_dist:
                best_x, best_dist, best_lam = x, dist, mid
    return _outcome(net, x0, best_x, c, target, "margin_l2", lam=best_lam)


@dataclass
class BoundReport:
    violations: int
    total: int
    fraction_valid: float | None
    rows: list[dict] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "no successful attacks" if self.fraction_valid is None else "ok"


def verify_bounds(scores: Mapping, outcomes: Mapping, p=None) -> BoundReport:
    """Count cases where a lower-bound score exceeds a successful attack's distortion.

    ``scores`` and ``outcomes`` are keyed identically, e.g. by
    ``(instance, target, p)``. Values in ``scores`` are floats or objects with
    ``.value`` and ``.p``; failed attacks are excluded from the denominator.
    """
    if set(scores) != set(outcomes):
        missing = set(scores) ^ set(outcomes)
        raise AlignmentError(f"scores and outcomes disagree on keys: {sorted(map(str, missing))[:5]}")
    rows, violations, total = [], 0, 0
    for key in scores:
        score = scores[key]
        value = float(getattr(score, "value", score))
        norm = getattr(score, "p", p)
        if norm is None:
            raise ValueError("norm order unknown: pass p or scores with a .p attribute")
        outcome = outcomes[key]
        dist = outcome.distortion(norm)
        violated = bool(outcome.success and value > dist)
        if outcome.success:
            total += 1
            violations += violated
        rows.append({"key": key, "score": value, "distortion": dist,
                     "success": outcome.success, "violation": violated})
    fraction = None if total == 0 else 1.0 - violations / total
    return BoundReport(violations, total, fraction, rows)


def verify_bound_lists(scores: Sequence, outcomes: Sequence, keys: Sequence, p=None) -> BoundReport:
    if not (len(scores) == len(outcomes) == len(keys)):
        raise AlignmentError("scores, outcomes and keys must have equal length")
    return verify_bounds(dict(zip(keys, scores)), dict(zip(keys, outcomes)), p)
