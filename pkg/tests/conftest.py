import warnings

import pytest

from crowdgrid import fixtures, opf

warnings.filterwarnings("ignore", message="Solution may be inaccurate")


@pytest.fixture(scope="session")
def scenario6_small():
    return fixtures.scenario6(horizon=6)


@pytest.fixture(scope="session")
def solved6_small(scenario6_small):
    sol = opf.solve_opf(opf.build_opf(scenario6_small))
    assert sol.status == "optimal"
    return sol
