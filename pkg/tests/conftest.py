import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neurocomp.signal_core import SynthConfig, generate_synthetic

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# criterion number -> (passed or None for skipped, one-line detail)
ACCEPTANCE: dict = {}


def record(n: int, title: str, passed, detail: str = ""):
    ACCEPTANCE[n] = (title, passed, detail)


@pytest.fixture(scope="session")
def acceptance_record():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        tag = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"[{tag}] {n:2d}. {title}: {detail}")


@pytest.fixture(scope="session")
def synth_005():
    return generate_synthetic(SynthConfig(noise_sigma=0.05, duration_s=10.0, seed=0))


@pytest.fixture(scope="session")
def short_synth():
    return generate_synthetic(SynthConfig(noise_sigma=0.05, duration_s=2.0, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
