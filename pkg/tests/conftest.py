import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from codedstereo.optics import OpticalConfig, PhaseMask, compute_psf_stack, make_cubic_mask

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def config():
    return OpticalConfig()


@pytest.fixture(scope="session")
def flat_stack(config):
    return compute_psf_stack(PhaseMask.flat(config.mask_grid_size), config)


@pytest.fixture(scope="session")
def cubic_stack(config):
    return compute_psf_stack(make_cubic_mask(30.0, config), config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
    config.acceptance_lines = []


@pytest.fixture
def record(request):
    """Print and remember one PASS/FAIL line; the terminal summary repeats them all."""
    lines = request.config.acceptance_lines

    def _record(label, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
