import numpy as np
import pytest
from hypothesis import settings

from cvboot.sim import GeneratorSpec, generate

settings.register_profile("default", max_examples=100, deadline=None)
settings.register_profile("thorough", max_examples=1000, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_data():
    return generate(GeneratorSpec("linear_lowdim", seed=7))


@pytest.fixture(scope="session")
def logistic_data():
    return generate(GeneratorSpec("logistic_lowdim", seed=7))


@pytest.fixture(scope="session")
def itr_data():
    return generate(GeneratorSpec("itr_lowdim", seed=7))


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
