import os
from pathlib import Path

import numpy as np
import pytest

from plumetrace.fem import assemble
from plumetrace.mesh import classify_boundary, generate_rect_mesh
from plumetrace.sensing import SensorConfig, grid_positions
from plumetrace.transport import TimeGrid
from plumetrace.wind import UniformWind, VortexWind


@pytest.fixture(scope="session")
def resources_dir() -> Path:
    return Path(os.path.dirname(__file__)) / "resources"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def swirl():
    return UniformWind(0.3, 0.1) + VortexWind((0.5, 0.5), 0.05, 0.25)


@pytest.fixture(scope="session")
def small_ops(swirl):
    """Advection dominated operators on a 12 x 12 unit square."""
    mesh = classify_boundary(generate_rect_mesh(1.0, 1.0, 12, 12), swirl)
    return assemble(mesh, swirl, 1e-3)


@pytest.fixture(scope="session")
def still_ops():
    """Pure diffusion operators on an 8 x 8 unit square."""
    wind = UniformWind(0.0, 0.0)
    mesh = classify_boundary(generate_rect_mesh(1.0, 1.0, 8, 8), wind)
    return assemble(mesh, wind, 1e-2)


@pytest.fixture(scope="session")
def short_grid() -> TimeGrid:
    return TimeGrid(dt=0.02, n_steps=10)


@pytest.fixture(scope="session")
def small_sensors(short_grid) -> SensorConfig:
    return SensorConfig.shared_times(
        grid_positions(1.0, 1.0, 3, 3),
        short_grid.times[1:],
        rho_x=0.2,
        rho_t=0.04,
    )
