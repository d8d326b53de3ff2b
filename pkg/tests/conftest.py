import numpy as np
import pytest

from ppenkf.core import Ensemble, Grid, build_state_layout


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long-running acceptance criteria")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_layout():
    # 4x3 grid, three pilots, heads only
    g = Grid(4, 3, 10.0, 10.0)
    return build_state_layout(g, (1, 6, 11), ("head",))


def random_ensemble(layout, n_e, rng, scale=1.0):
    X = rng.normal(size=(n_e, layout.n_s)) * scale
    # correlate the heads with the parameters so updates are non-trivial
    X[:, layout.dynamic_slice] += 0.5 * layout.param_field(X[:, layout.param_slice])
    return Ensemble(X, layout)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
