import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, M, rank=None, scale=1.0):
    """Random Hermitian PSD matrix of the given rank with trace ``scale * M``."""
    k = M if rank is None else rank
    A = (rng.standard_normal((M, k)) + 1j * rng.standard_normal((M, k))) / np.sqrt(2)
    R = A @ A.conj().T
    return scale * M * R / np.trace(R).real


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _ACCEPTANCE.append((str(number), line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
