import numpy as np
import pytest
import torch

from hiertsc.network import build_grid_network


@pytest.fixture(scope="session")
def grid2x2():
    return build_grid_network(2, 2)


@pytest.fixture(scope="session")
def grid4x4():
    return build_grid_network(4, 4, region_rows=2, region_cols=2)


@pytest.fixture(scope="session")
def single():
    return build_grid_network(1, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS, report_lines
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in report_lines():
        terminalreporter.write_line(line)
