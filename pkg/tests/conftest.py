import numpy as np
import pytest

from volauction import default_scenario, init_mechanism
from volauction.core import make_lot_grid, make_schedule


@pytest.fixture(scope="session")
def scenario():
    return default_scenario()


@pytest.fixture(scope="session")
def small_params(scenario):
    return init_mechanism(scenario.fingerprint(), hidden=(80,) * 5, seed=7)


@pytest.fixture
def worked_grid():
    # the 2500-unit, 5-lot setting used in the bid-language examples
    return make_lot_grid(2500, 5)


@pytest.fixture
def worked_bids(worked_grid):
    b1 = make_schedule([20, 18, 18, 16, 16], 2500, worked_grid)
    b2 = make_schedule([18, 17, 17], 1500, worked_grid)
    return [b1, b2]


def random_instance(rng, n_max=4, m_max=20, k_max=4):
    """Small random auction: continuous prices so welfare ties have measure zero."""
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    k = int(rng.integers(1, min(k_max, m) + 1))
    grid = make_lot_grid(m, k)
    reserve = float(rng.uniform(0.5, 2.0))
    bids = []
    for _ in range(n):
        raw = np.sort(rng.uniform(reserve, reserve + 4.0, size=grid.lot_count))[::-1]
        aligned = int(rng.integers(0, grid.lot_count + 1)) * grid.lot_size
        req = m if (aligned > m or rng.random() < 0.3) else aligned
        bids.append(make_schedule(raw, req, grid))
    return grid, reserve, bids
