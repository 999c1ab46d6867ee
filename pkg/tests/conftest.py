import pytest

from orderplacement import ExponentialOutflow, FactorOutflow, MarketSpec, PoissonOutflow

# pricing and penalties in mills per share
H, F, R, LU, LO = 200.0, 30.0, 20.0, 260.0, 240.0


@pytest.fixture
def single_spec():
    return MarketSpec(H, F, (R,), LU, LO, 1000.0, (2000.0,))


@pytest.fixture
def poisson_model():
    return PoissonOutflow((2200.0,))


@pytest.fixture
def two_spec():
    return MarketSpec(H, F, (R, R), LU, LO, 1000.0, (1900.0, 2000.0))


@pytest.fixture
def interior_two():
    """Two independent exponential venues whose optimum is interior to C."""
    spec = MarketSpec(H, F, (R, R), 2000.0, 600.0, 1000.0, (100.0, 100.0))
    return spec, ExponentialOutflow((1000.0, 1000.0))


@pytest.fixture
def factor_model():
    return FactorOutflow((2200.0, 2200.0), 0.6)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
