import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

# share the nonlinearity tables across test processes and reruns
os.environ.setdefault("LOADCAST_TABLE_CACHE", str(Path(tempfile.gettempdir()) / "loadcast-table-cache"))

from loadcast import grid_sim, nngp  # noqa: E402


@pytest.fixture(scope="session")
def relu_table():
    return nngp.get_table(nngp.Nonlinearity.RELU)


@pytest.fixture(scope="session")
def identity_table():
    return nngp.get_table(nngp.Nonlinearity.IDENTITY)


@pytest.fixture(scope="session")
def feeder():
    return grid_sim.eight_bus_feeder()


@pytest.fixture(scope="session")
def feeder_data(feeder):
    """130 days of the 8-bus feeder with rooftop PV."""
    return grid_sim.generate_year(feeder, pv_profile_spec=grid_sim.PVProfileSpec(), seed=7, days=130)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
