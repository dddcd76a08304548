import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cleverscore.clever import (
    MisclassifiedError,
    TargetSpec,
    clever_t,
    clever_u,
    select_target,
    theoretical_lower_bound,
)
from cleverscore.fixtures import random_one_hidden_relu
from cleverscore.net import InvalidTargetError, forward, predict
from cleverscore.sampling import INF, Ball, SampleConfig, lp_norm

from conftest import linear_net

SMALL = SampleConfig(20, 64, 0)


def test_lower_bound_examples():
    assert theoretical_lower_bound(1.0, 2.0, 5.0) == 0.5
    assert theoretical_lower_bound(100.0, 1.0, 5.0) == 5.0
    assert theoretical_lower_bound(0.0, 3.0, 5.0) == 0.0
    assert theoretical_lower_bound(0.0, 0.0, 5.0) == 0.0
    assert theoretical_lower_bound(2.0, 0.0, 5.0) == 5.0
    with pytest.raises(ValueError):
        theoretical_lower_bound(-1.0, 1.0, 5.0)
    with pytest.raises(ValueError):
        theoretical_lower_bound(1.0, -1.0, 5.0)


@given(seed=st.integers(0, 10_000), p=st.sampled_from([1.0, 2.0, INF]), radius=st.floats(0.1, 50.0))
def test_linear_targeted_closed_form(seed, p, radius):
    rng = np.random.default_rng(seed)
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    net = linear_net(w, b)
    x0 = rng.normal(size=4)
    c = predict(net, x0)
    j = (c + 1) % 3
    score = clever_t(net, x0, j, Ball(x0, radius, p), SMALL)
    logits = forward(net, x0)
    expected = min((logits[c] - logits[j]) / lp_norm(w[c] - w[j], Ball(x0, 1, p).q), radius)
    assert abs(score.value - expected) <= 1e-9 * max(1.0, expected)
    assert score.fit.degenerate
    assert "degenerate-fit" in score.warnings


def test_linear_untargeted_closed_form():
    w = np.array([[2.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    net = linear_net(w)
    x0 = np.array([0.6, 0.2])
    nu = clever_u(net, x0, Ball(x0, 5.0, 2), SMALL)
    logits = forward(net, x0)
    expected = min((logits[0] - logits[j]) / np.linalg.norm(w[0] - w[j]) for j in (1, 2))
    assert nu.value == pytest.approx(expected, rel=1e-12)
    assert nu.target_j is None


def test_tie_gives_zero():
    net = linear_net(np.array([[1.0, 0.0], [0.0, 1.0]]))
    x0 = np.array([0.5, 0.5])
    score = clever_t(net, x0, 1, Ball(x0, 5.0, 2), SMALL, c=0)
    assert score.value == 0.0 and score.tie and "tie" in score.warnings


def test_cap_at_radius():
    net = linear_net(np.array([[1.0, 0.0], [0.0, 1.0]]))
    x0 = np.array([100.0, 0.0])
    score = clever_t(net, x0, 1, Ball(x0, 5.0, 2), SMALL)
    assert score.value == 5.0 and score.capped


def test_two_class_untargeted_equals_targeted():
    net, x0 = random_one_hidden_relu(3, 5, 2, seed=1)
    c = predict(net, x0)
    ball = Ball(x0, 1.0, 2)
    nu = clever_u(net, x0, ball, SMALL)
    mu = clever_t(net, x0, 1 - c, ball, SMALL)
    assert nu.value == mu.value


def test_untargeted_is_min_of_targets():
    net, x0 = random_one_hidden_relu(3, 6, 4, seed=2)
    nu = clever_u(net, x0, Ball(x0, 1.0, INF), SMALL)
    assert len(nu.per_target) == 3
    assert all(nu.value <= s.value for s in nu.per_target.values())
    assert f"argmin-class={min(nu.per_target, key=lambda j: nu.per_target[j].value)}" in nu.warnings


def test_location_estimate_bounds_samples():
    net, x0 = random_one_hidden_relu(2, 6, 3, seed=4)
    c = predict(net, x0)
    score = clever_t(net, x0, (c + 1) % 3, Ball(x0, 1.0, 2), SampleConfig(50, 128, 3), keep_samples=True)
    assert score.location_estimate >= score.samples.values.max()
    assert score.value == pytest.approx(min(score.margin / score.location_estimate, 1.0), rel=1e-15)


def test_misclassified_and_bad_target():
    net = linear_net(np.eye(3))
    x0 = np.array([0.0, 1.0, 0.5])
    with pytest.raises(MisclassifiedError):
        clever_t(net, x0, 2, Ball(x0, 1.0, 2), SMALL, c=0)
    with pytest.raises(InvalidTargetError):
        clever_t(net, x0, 1, Ball(x0, 1.0, 2), SMALL)


def test_score_is_deterministic():
    net, x0 = random_one_hidden_relu(3, 8, 3, seed=5)
    c = predict(net, x0)
    a = clever_t(net, x0, (c + 1) % 3, Ball(x0, 2.0, 2), SampleConfig(30, 100, 7))
    b = clever_t(net, x0, (c + 1) % 3, Ball(x0, 2.0, 2), SampleConfig(30, 100, 7))
    assert a.value == b.value


def test_select_target_examples():
    net = linear_net(np.eye(3))
    x0 = np.array([0.1, 0.9, 0.5])
    assert select_target(net, x0, TargetSpec("top2")) == 2
    assert select_target(net, x0, TargetSpec("least")) == 0
    assert select_target(net, x0, TargetSpec.parse("fixed:0")) == 0
    with pytest.raises(InvalidTargetError):
        select_target(net, x0, TargetSpec("fixed", 1))


def test_random_target_excludes_c_and_hits_all():
    net = linear_net(np.eye(4))
    x0 = np.array([0.0, 0.0, 1.0, 0.0])
    rng = np.random.default_rng(0)
    seen = [select_target(net, x0, TargetSpec("random"), rng) for _ in range(10_000)]
    assert 2 not in seen and set(seen) == {0, 1, 3}


def test_least_under_total_tie():
    net = linear_net(np.eye(3))
    assert select_target(net, np.zeros(3), TargetSpec("least")) == 1


def test_target_spec_parsing():
    assert TargetSpec.parse("Top-2").kind == "top2"
    assert TargetSpec.parse("LL").kind == "least"
    assert str(TargetSpec.parse("fixed:3")) == "fixed:3"
    with pytest.raises(ValueError):
        TargetSpec.parse("second")
