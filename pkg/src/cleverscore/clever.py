"""CLEVER robustness scores (targeted and untargeted) and closed-form bounds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import evt
from .net import InvalidTargetError, Network, forward, margin, predict
from .sampling import Ball, GradNormSampleSet, SampleConfig, collect_batch_maxima

DEFAULT_RADIUS = 5.0
KS_ALPHA = 0.05

TARGET_KINDS = ("top2", "random", "least", "fixed")


@dataclass(frozen=True)
class TargetSpec:
    kind: str
    j: int | None = None

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "fixed" and self.j is None:
            raise ValueError("fixed target needs a class index")

    @classmethod
    def parse(cls, text: str) -> "TargetSpec":
        text = text.strip().lower()
        aliases = {"top-2": "top2", "leastlikely": "least", "least_likely": "least", "ll": "least"}
        text = aliases.get(text, text)
        if text.startswith("fixed:"):
            return cls("fixed", int(text.split(":", 1)[1]))
        return cls(text)

    def __str__(self) -> str:
        return f"fixed:{self.j}" if self.kind == "fixed" else self.kind


@dataclass
class CleverScore:
    value: float
    p: float
    target_j: int | None
    location_estimate: float
    margin: float
    capped: bool
    radius: float
    class_c: int
    fit: evt.FitResult | None = None
    tie: bool = False
    warnings: list[str] = field(default_factory=list)
    per_target: dict[int, "CleverScore"] = field(default_factory=dict, repr=False)
    samples: GradNormSampleSet | None = field(default=None, repr=False)


class MisclassifiedError(ValueError):
    """The instance is not predicted as the class the caller assumed."""


def theoretical_lower_bound(g_val: float, lipschitz: float, radius: float) -> float:
    """``min(g / L, R)``: the certified radius for a margin ``g`` and Lipschitz constant ``L``."""
    if g_val < 0 or lipschitz < 0:
        raise ValueError(f"margin and Lipschitz constant must be non-negative, got g={g_val}, L={lipschitz}")
    if g_val == 0:
        return 0.0
    if lipschitz == 0:
        return float(radius)
    return float(min(g_val / lipschitz, radius))


def score_from_samples(g_val: float, samples: GradNormSampleSet, radius: float) -> tuple[float, evt.FitResult]:
    """Fit the batch maxima and turn the fitted location into a score."""
    fit = evt.fit_reverse_weibull_mle(samples)
    return theoretical_lower_bound(max(g_val, 0.0), fit.endpoint_estimate, radius), fit


def clever_t(
    net: Network,
    x0: np.ndarray,
    j: int,
    ball: Ball | None = None,
    cfg: SampleConfig | None = None,
    c: int | None = None,
    keep_samples: bool = False,
) -> CleverScore:
    """Targeted CLEVER score of ``x0`` against class ``j``.

    Samples the gradient norm of the margin ``f_c - f_j`` in batches over the
    ball, fits a reverse Weibull to the batch maxima and returns
    ``min(g(x0) / a_hat, R)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    ball = ball or Ball(x0, DEFAULT_RADIUS, 2)
    cfg = cfg or SampleConfig()
    predicted = predict(net, x0)
    if c is None:
        c = predicted
    elif c != predicted:
        raise MisclassifiedError(f"x0 is predicted as class {predicted}, not {c}")
    if j == c or not 0 <= j < net.num_classes:
        raise InvalidTargetError(f"target class {j} is invalid for predicted class {c}")

    g0 = float(margin(net, x0, c, j))
    samples = collect_batch_maxima(net, x0, c, j, Ball(x0, ball.radius, ball.p), cfg)
    value, fit = score_from_samples(g0, samples, ball.radius)
    warnings = []
    if g0 <= 0:
        warnings.append("tie")
    if fit.degenerate:
        warnings.append("degenerate-fit")
    elif fit.ks_pvalue < KS_ALPHA:
        warnings.append("fit-quality")
    if fit.gumbel_limit:
        warnings.append("gumbel-limit")
    return CleverScore(
        value=value,
        p=ball.p,
        target_j=j,
        location_estimate=fit.endpoint_estimate,
        margin=g0,
        capped=g0 > 0 and value == ball.radius,
        radius=ball.radius,
        class_c=c,
        fit=fit,
        tie=g0 <= 0,
        warnings=warnings,
        samples=samples if keep_samples else None,
    )


def clever_u(
    net: Network,
    x0: np.ndarray,
    ball: Ball | None = None,
    cfg: SampleConfig | None = None,
    c: int | None = None,
) -> CleverScore:
    """Untargeted score: the minimum of the targeted scores over every other class."""
    if net.num_classes < 2:
        raise ValueError("untargeted score needs at least two classes")
    x0 = np.asarray(x0, dtype=np.float64)
    c = predict(net, x0) if c is None else c
    per_target = {j: clever_t(net, x0, j, ball, cfg, c=c) for j in range(net.num_classes) if j != c}
    # min() keeps the first, i.e. lowest, class on ties
    best = min(per_target.values(), key=lambda s: s.value)
    return CleverScore(
        value=best.value,
        p=best.p,
        target_j=None,
        location_estimate=best.location_estimate,
        margin=best.margin,
        capped=best.capped,
        radius=best.radius,
        class_c=c,
        fit=best.fit,
        tie=best.tie,
        warnings=list(best.warnings) + [f"argmin-class={best.target_j}"],
        per_target=per_target,
    )


def select_target(
    net: Network,
    x0: np.ndarray,
    spec: TargetSpec,
    rng: np.random.Generator | None = None,
) -> int:
    """Resolve a target policy to a concrete class index for ``x0``."""
    logits = forward(net, np.asarray(x0, dtype=np.float64))
    c = int(np.argmax(logits))
    k = logits.shape[0]
    if k < 2:
        raise ValueError("need at least two classes to pick a target")
    others = np.array([i for i in range(k) if i != c])
    if spec.kind == "top2":
        return int(others[np.argmax(logits[others])])
    if spec.kind == "least":
        j = int(np.argmin(logits))
        return j if j != c else int(others[0])
    if spec.kind == "random":
        if rng is None:
            raise ValueError("random target selection needs an rng")
        return int(rng.choice(others))
    if spec.j == c or not 0 <= spec.j < k:
        raise InvalidTargetError(f"fixed target {spec.j} is invalid for predicted class {c}")
    return int(spec.j)
