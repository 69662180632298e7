import numpy as np
import pytest

from evomeasure.model import ForcingSpec, ModelParams


@pytest.fixture
def gauss_forcing():
    return ForcingSpec("gaussian_decay", {"a": 1.0, "b": 0.05, "r": 3})


@pytest.fixture
def params(gauss_forcing):
    """Default desk profile: lambda = nu = delta = 1, p = 3, I = 20, epsilon at the top of its range."""
    return ModelParams(epsilon=0.5, g=gauss_forcing)


@pytest.fixture
def small_params(gauss_forcing):
    return ModelParams(epsilon=0.5, g=gauss_forcing, trunc_radius=6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
    missing = [n for n in range(1, 11) if n not in results]
    if missing:
        terminalreporter.write_line(f"not run: {missing}")
