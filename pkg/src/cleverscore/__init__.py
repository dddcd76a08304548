"""Extreme-value estimates of local cross-Lipschitz constants and robustness scores."""

from .clever import CleverScore, TargetSpec, clever_t, clever_u, theoretical_lower_bound
from .evt import FitResult, ReverseWeibullParams, fit_reverse_weibull_mle
from .net import Activation, DenseLayer, Network, forward, margin_and_grad, predict
from .sampling import Ball, SampleConfig, collect_batch_maxima

__all__ = [
    "Activation",
    "Ball",
    "CleverScore",
    "DenseLayer",
    "FitResult",
    "Network",
    "ReverseWeibullParams",
    "SampleConfig",
    "TargetSpec",
    "clever_t",
    "clever_u",
    "collect_batch_maxima",
    "fit_reverse_weibull_mle",
    "forward",
    "margin_and_grad",
    "predict",
    "theoretical_lower_bound",
]
