import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mrsyolo.model import ModelConfig, build

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def toy_model():
    """Reference toy mrs model: widths (24, 48, 96, 192), depth 1, 4 classes, 64x64."""
    return build(ModelConfig(), seed=0)


@pytest.fixture(scope="session")
def baseline_model():
    return build(ModelConfig(variant="baseline"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---- acceptance reporting -------------------------------------------------------

import contextlib


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""

    @contextlib.contextmanager
    def record(number, text):
        try:
            yield
        except BaseException:
            request.config._acceptance[number] = f"criterion {number}: FAIL  {text}"
            raise
        request.config._acceptance[number] = f"criterion {number}: PASS  {text}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
