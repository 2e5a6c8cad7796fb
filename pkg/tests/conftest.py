import numpy as np
import pytest

from levymix.levy_noise import LevyConfig
from levymix.spde_model import ModelConfig, NonlinearitySpec, VerificationConfig, build_example_spectrum

ACCEPTANCE_RESULTS = {}


def make_model(alpha=1.5, D=8, N=16, K=1.0, a=0.1, g=1.0, d=1, dt=1e-3, T=1.0, **ver):
    spec = build_example_spectrum(d, N, D)
    F = NonlinearitySpec.mode_tanh(a, g, N) if a else NonlinearitySpec.zero()
    return ModelConfig(LevyConfig(alpha, D, K), spec, F, T, dt, VerificationConfig(**ver))


@pytest.fixture
def reference_model():
    """d=1 Dirichlet spectrum, N=16, D=8, alpha=1.5, K=1, mode_tanh a=0.1 g=1."""
    return make_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def record_acceptance(number, passed, line):
    ACCEPTANCE_RESULTS[number] = (passed, line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, line = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {line}")
