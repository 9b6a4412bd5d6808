import numpy as np
import pytest

from mmea.model import ModelConfig, Potential

ELEMENTS = ["H", "C", "O"]


def desk_config(**kw) -> ModelConfig:
    """16-channel model with the default ranks, correlation and depth."""
    base = dict(elements=ELEMENTS, channels=16, avg_num_neighbors=3.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def desk_potential() -> Potential:
    return Potential.create(desk_config(), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
