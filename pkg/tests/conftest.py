import numpy as np
import pytest

from phnlab.model import build_model, build_phase_type, erlang2_model, exponential_model, normalize_mean


@pytest.fixture
def expo():
    return exponential_model(alpha=0.5, beta=1.0)


@pytest.fixture
def ou():
    """One-phase model with alpha = 1: the diffusion is OU with stationary law N(-1, 1)."""
    return exponential_model(alpha=1.0, beta=1.0)


@pytest.fixture
def erlang():
    return erlang2_model(alpha=0.5, beta=1.0)


@pytest.fixture
def three_phase():
    P = np.array([[0.0, 0.3, 0.2], [0.1, 0.0, 0.4], [0.0, 0.0, 0.0]])
    pt = build_phase_type([0.5, 0.3, 0.2], P, [1.0, 2.0, 3.0])
    return build_model(normalize_mean(pt), alpha=0.7, beta=0.5)


@pytest.fixture(params=["expo", "erlang", "three_phase"])
def any_model(request):
    return request.getfixturevalue(request.param)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
