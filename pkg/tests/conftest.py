import math

import numpy as np
import pytest
from hypothesis import settings

from pourplan import geometry as G
from pourplan import presets as PR

settings.register_profile("ci", deadline=None, derandomize=True,
                          max_examples=50)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def cylinder_profile():
    return PR.cylinder_profile()


@pytest.fixture(scope="session")
def oval_profile():
    return PR.oval_profile()


@pytest.fixture(scope="session")
def cylinder_tables(cylinder_profile):
    # 2-degree sampling keeps module tests fast; acceptance builds at 1 degree
    return G.build_tables(cylinder_profile, theta_step=math.radians(2.0),
                          grid_cell=1e-3)


@pytest.fixture(scope="session")
def oval_tables(oval_profile):
    return G.build_tables(oval_profile, theta_step=math.radians(2.0),
                          grid_cell=1e-3)


@pytest.fixture(scope="session")
def synthetic_tables():
    """Small hand-built table grid for exact interpolation checks."""
    theta = np.array([0.0, 0.1, 0.2, 0.3])
    vol = np.array([0.0, 1e-5, 2e-5, 3e-5])
    A = np.zeros((4, 4))
    A[:, 1:] = np.array([[1.0, 2.0, 3.0],
                         [2.0, 3.0, 4.0],
                         [3.0, 4.0, 5.0],
                         [4.0, 5.0, 6.0]]) * 1e-4
    dh = A * 50.0
    ex = np.full((4, 4), 0.01)
    ez = np.full((4, 4), 0.05)
    return G.GeomTables(container_id="synthetic", theta=theta, vol_levels=vol,
                        A=A, dh=dh, ex=ex, ez=ez, grid_cell=1e-3,
                        theta_step=0.1, lip_local=np.array([0.01, 0.05]))
