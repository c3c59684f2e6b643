import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emsdeploy.geogrid import SyntheticSpeedProvider, build_grid


@pytest.fixture
def grid_2x2():
    return build_grid((30.0, 30.2, -97.2, -97.0), 2, 2, SyntheticSpeedProvider(60.0),
                      station_cells=[0], hospital_cells=[3])


@pytest.fixture
def grid_3x3():
    return build_grid((30.0, 30.3, -97.3, -97.0), 3, 3, SyntheticSpeedProvider(50.0),
                      station_cells=[0, 8], hospital_cells=[4])


def random_edge_set(rng: np.random.Generator, n_stations: int, n_regions: int, p: float = 0.6):
    pairs = [(i, j) for i in range(n_stations) for j in range(n_regions) if rng.random() < p]
    return pairs
