import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cleverscore.fixtures import STANDARD_RECIPES, build_fixture, load_digits_dataset, recipe_datasets
from cleverscore.net import Activation, DenseLayer, Network

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def linear_net(weights, bias=None) -> Network:
    w = np.asarray(weights, dtype=float)
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    return Network((DenseLayer(w, b, Activation("identity")),))


def one_unit_net() -> Network:
    """W1=[[2,-1]], b1=[-1], W2=[[1],[-1]], b2=0."""
    return Network((
        DenseLayer([[2.0, -1.0]], [-1.0], Activation("relu")),
        DenseLayer([[1.0], [-1.0]], [0.0, 0.0]),
    ))


def random_net(rng: np.random.Generator, d: int, hidden: list[int], kinds: list[str], k: int) -> Network:
    sizes = [d, *hidden, k]
    acts = [Activation(kind, cap=1.5) for kind in kinds] + [Activation("identity")]
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
        layers.append(DenseLayer(rng.normal(0, 1 / np.sqrt(fan_in), (fan_out, fan_in)),
                                 rng.normal(0, 0.5, fan_out), act))
    return Network(tuple(layers))


@pytest.fixture(scope="session")
def fixture_nets():
    """Trained standard fixtures, built once per session."""
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = build_fixture(STANDARD_RECIPES[name])[0]
        return cache[name]

    return get


@pytest.fixture(scope="session")
def digits_test():
    return load_digits_dataset()[1]


@pytest.fixture(scope="session")
def blob_test():
    def get(name):
        return recipe_datasets(STANDARD_RECIPES[name])[1]

    return get


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; lines are repeated in the summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
