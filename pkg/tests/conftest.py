import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fieldcrystal.bloch_cell import CouplingSpec, ModelParams

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
REFERENCE_CONFIG = os.path.join(ROOT, "configs", "reference.ini")


def reference_model(N: int = 4096, K: int = 8) -> ModelParams:
    return ModelParams(d=1, n=1, m0=1.0, nu0=1.0, K=K, coupling=CouplingSpec.gaussian(0.1, 0.2), N=N)


def decoupled_model(K: int = 1, N: int = 16, m0: float = 1.0, nu0: float = 1.0) -> ModelParams:
    return ModelParams(d=1, n=1, m0=m0, nu0=nu0, K=K, coupling=CouplingSpec.zero(), N=N)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_model():
    """Coupled model on a short crystal, cheap enough for exhaustive checks."""
    return reference_model(N=32, K=3)


@pytest.fixture
def ref_model():
    return reference_model()


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
