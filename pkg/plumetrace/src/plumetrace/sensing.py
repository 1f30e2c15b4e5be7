"""Sensor readings as smooth local space-time averages.

A reading is the normalized integral of the concentration against a
separable bump centred at the sensor position and sample time. Space is
integrated with the mass matrix, time with the trapezoidal rule.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.spatial import cKDTree

from plumetrace.fem import mass_matrix
from plumetrace.mesh import Mesh, locate
from plumetrace.transport import SpaceTimeField, TimeGrid

logger = logging.getLogger(__name__)

MEASUREMENT_COLUMNS = ["sensor_id", "x", "y", "t", "value"]
SIGMA_FLOOR_FRACTION = 1e-3


@dataclass(frozen=True, eq=False)
class SensorConfig:
    positions: np.ndarray
    sample_times: Tuple[np.ndarray, ...]
    rho_x: float
    rho_t: float
    sigma_plateau: float = 0.5

    def __post_init__(self) -> None:
        positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if positions.shape[1] != 2:
            raise ValueError("Sensor positions must be 2D points.")
        times = tuple(
            np.atleast_1d(np.asarray(t, dtype=float))
            for t in self.sample_times
        )
        if len(times) != len(positions):
            raise ValueError(
                f"Got {len(positions)} sensors but "
                f"{len(times)} sample time lists."
            )
        if not self.rho_x > 0 or not self.rho_t > 0:
            raise ValueError("Sensor support radii must be positive.")
        if not 0 < self.sigma_plateau < 1:
            raise ValueError(
                f"Plateau fraction must lie in (0, 1): {self.sigma_plateau}."
            )
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "sample_times", times)

    @classmethod
    def shared_times(
        cls,
        positions: np.ndarray,
        times: Sequence[float],
        rho_x: float,
        rho_t: float,
        sigma_plateau: float = 0.5,
    ) -> "SensorConfig":
        times = np.asarray(times, dtype=float)
        return cls(
            positions=positions,
            sample_times=tuple(times for _ in range(len(positions))),
            rho_x=rho_x,
            rho_t=rho_t,
            sigma_plateau=sigma_plateau,
        )

    @property
    def n_sensors(self) -> int:
        return len(self.positions)

    @property
    def n_observations(self) -> int:
        return sum(len(t) for t in self.sample_times)

    def observation_table(self) -> pd.DataFrame:
        """Sensor id, position and time of every observation, in order."""
        counts = [len(t) for t in self.sample_times]
        ids = np.repeat(np.arange(self.n_sensors), counts)
        times = (
            np.concatenate(self.sample_times) if counts else np.zeros(0)
        )
        return pd.DataFrame(
            {
                "sensor_id": ids,
                "x": self.positions[ids, 0],
                "y": self.positions[ids, 1],
                "t": times,
            }
        )


def grid_positions(
    width: float, height: float, nx: int, ny: int, margin: float = 0.5
) -> np.ndarray:
    """Regular sensor layout; ``margin`` is in units of the grid spacing."""
    if nx < 1 or ny < 1:
        raise ValueError("Sensor grid needs at least one row and column.")
    xs = width * (np.arange(nx) + margin) / (nx - 1 + 2 * margin)
    ys = height * (np.arange(ny) + margin) / (ny - 1 + 2 * margin)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


def smooth_cutoff(s: np.ndarray, plateau: float) -> np.ndarray:
    """1 for s <= plateau**2, 0 for s >= 1, smooth and monotone between."""
    s = np.asarray(s, dtype=float)
    edge = plateau**2
    q = np.clip((np.atleast_1d(s) - edge) / (1.0 - edge), 0.0, 1.0)
    inner = (q > 0) & (q < 1)
    out = np.where(q <= 0, 1.0, 0.0)
    qi = q[inner]
    rising = np.exp(-1.0 / (1.0 - qi))
    falling = np.exp(-1.0 / qi)
    out[inner] = rising / (rising + falling)
    return out.reshape(s.shape)


def eta_bump(
    dx: np.ndarray, dt_off: np.ndarray, cfg: SensorConfig
) -> np.ndarray:
    dx = np.asarray(dx, dtype=float)
    space = np.sum(dx**2, axis=-1) / cfg.rho_x**2
    time = np.asarray(dt_off, dtype=float) ** 2 / cfg.rho_t**2
    return smooth_cutoff(space, cfg.sigma_plateau) * smooth_cutoff(
        time, cfg.sigma_plateau
    )


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    weights = np.full(grid.n_steps + 1, grid.dt)
    weights[[0, -1]] = grid.dt / 2
    return weights


@dataclass(frozen=True, eq=False)
class ObservationOperator:
    """Normalized readings of a stacked space-time field.

    Column ``n * n_dof + j`` of ``matrix`` belongs to node j at time
    level n.
    """

    matrix: sparse.csr_matrix
    normalization: np.ndarray
    grid: TimeGrid
    n_dof: int

    @property
    def n_observations(self) -> int:
        return self.matrix.shape[0]

    def _stacked(self, field) -> np.ndarray:
        values = field.values if isinstance(field, SpaceTimeField) else field
        values = np.asarray(values, dtype=float)
        levels = self.grid.n_steps + 1
        if values.ndim != 2 or values.shape[1] != self.n_dof:
            raise ValueError(
                f"Field of shape {values.shape} does not match "
                f"{self.n_dof} dofs."
            )
        if len(values) < levels:
            raise ValueError(
                f"Field covers {len(values)} time levels, "
                f"observations need {levels}."
            )
        return values[:levels].ravel()

    def apply(self, field: Union[SpaceTimeField, np.ndarray]) -> np.ndarray:
        """Readings of a field; levels past the grid are ignored."""
        return self.matrix @ self._stacked(field)

    def adjoint_loads(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_observations,):
            raise ValueError(
                f"Misfit has length {len(y)}, "
                f"expected {self.n_observations}."
            )
        loads = self.matrix.T @ y
        return np.asarray(loads).reshape(self.grid.n_steps + 1, self.n_dof)


def _validate_sensors(mesh: Mesh, grid: TimeGrid, cfg: SensorConfig) -> None:
    triangles, _ = locate(mesh, cfg.positions)
    if (triangles < 0).any():
        index = int(np.argmax(triangles < 0))
        raise ValueError(
            f"Sensor {index} at {tuple(cfg.positions[index])} "
            f"lies outside the domain."
        )
    slack = 1e-9 * grid.horizon
    for index, times in enumerate(cfg.sample_times):
        if len(times) and (
            times.min() < -slack or times.max() > grid.horizon + slack
        ):
            raise ValueError(
                f"Sensor {index} samples outside [0, {grid.horizon:g}] s."
            )


def assemble_observation(
    mesh: Mesh, grid: TimeGrid, cfg: SensorConfig
) -> ObservationOperator:
    _validate_sensors(mesh, grid, cfg)
    M = mass_matrix(mesh).tocsc()
    tree = cKDTree(mesh.nodes)
    times = grid.times
    trapezoid = trapezoid_weights(grid)
    n_dof = mesh.n_nodes

    rows, cols, data = [], [], []
    normalization = np.zeros(cfg.n_observations)
    row = 0
    for sensor, (position, samples) in enumerate(
        zip(cfg.positions, cfg.sample_times)
    ):
        near = np.asarray(
            sorted(tree.query_ball_point(position, cfg.rho_x)), dtype=int
        )
        nodal = eta_bump(mesh.nodes[near] - position, 0.0, cfg)
        spatial = sparse.csc_matrix(M[:, near] @ sparse.csc_matrix(nodal).T)
        spatial_nodes = spatial.indices
        spatial_weights = spatial.data
        if spatial_weights.sum() <= 0:
            raise ValueError(
                f"Support of sensor {sensor} contains no mesh nodes; "
                f"increase rho_x."
            )
        for t in samples:
            temporal = trapezoid * smooth_cutoff(
                (times - t) ** 2 / cfg.rho_t**2, cfg.sigma_plateau
            )
            steps = np.flatnonzero(temporal > 0)
            if len(steps) == 0:
                raise ValueError(
                    f"Sample at t={t:g} s of sensor {sensor} covers "
                    f"no time level; increase rho_t."
                )
            weights = np.outer(temporal[steps], spatial_weights)
            scale = weights.sum()
            rows.append(np.full(weights.size, row))
            cols.append(
                (steps[:, None] * n_dof + spatial_nodes[None, :]).ravel()
            )
            data.append(weights.ravel() / scale)
            normalization[row] = scale
            row += 1

    shape = (cfg.n_observations, (grid.n_steps + 1) * n_dof)
    if rows:
        matrix = sparse.coo_matrix(
            (
                np.concatenate(data),
                (np.concatenate(rows), np.concatenate(cols)),
            ),
            shape=shape,
        ).tocsr()
    else:
        matrix = sparse.csr_matrix(shape)
    logger.debug(
        f"Observation operator: {cfg.n_sensors} sensors, "
        f"{cfg.n_observations} readings, {matrix.nnz} nonzeros."
    )
    return ObservationOperator(
        matrix=matrix, normalization=normalization, grid=grid, n_dof=n_dof
    )


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    d: np.ndarray
    sigma_noise: float = 0.0
    seed: Optional[int] = None
    snr_target: float = np.inf

    def __post_init__(self) -> None:
        d = np.asarray(self.d, dtype=float)
        if d.ndim != 1 or not np.isfinite(d).all():
            raise ValueError("Measurements must be a finite vector.")
        if not self.sigma_noise >= 0:
            raise ValueError(
                f"Noise level must be nonnegative: {self.sigma_noise}."
            )
        object.__setattr__(self, "d", d)

    @property
    def sigma_floor(self) -> float:
        peak = float(np.abs(self.d).max()) if len(self.d) else 0.0
        return SIGMA_FLOOR_FRACTION * peak if peak > 0 else 1.0

    @property
    def weight_sigma(self) -> float:
        """Noise level used to weight the misfit."""
        if self.sigma_noise > 0:
            return self.sigma_noise
        return self.sigma_floor


def add_noise(clean: np.ndarray, snr: float, seed: int) -> MeasurementSet:
    """Adds white Gaussian noise with std RMS(clean) / snr."""
    clean = np.asarray(clean, dtype=float)
    if not snr > 0:
        raise ValueError(f"Signal-to-noise ratio must be positive: {snr}.")
    if np.isinf(snr) or len(clean) == 0:
        return MeasurementSet(clean.copy(), 0.0, seed, snr)
    sigma = float(np.sqrt(np.mean(clean**2))) / snr
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=clean.shape) * sigma
    return MeasurementSet(clean + noise, sigma, seed, snr)


def misfit(
    predicted: np.ndarray,
    data: MeasurementSet,
    sigma_floor: Optional[float] = None,
) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=float)
    if predicted.shape != data.d.shape:
        raise ValueError(
            f"Predicted readings have length {len(predicted)}, "
            f"measurements {len(data.d)}."
        )
    sigma = data.sigma_noise
    if sigma <= 0:
        sigma = data.sigma_floor if sigma_floor is None else sigma_floor
    return (predicted - data.d) / sigma**2


def write_measurements(
    path: Union[str, Path], cfg: SensorConfig, values: np.ndarray
) -> None:
    values = np.asarray(values, dtype=float)
    if values.shape != (cfg.n_observations,):
        raise ValueError(
            f"Got {len(values)} values for {cfg.n_observations} readings."
        )
    frame = cfg.observation_table()
    frame["value"] = values
    frame.to_csv(path, index=False, float_format="%.17g")


def read_measurements(
    path: Union[str, Path], cfg: SensorConfig, tol: float = 1e-9
) -> np.ndarray:
    """Reads readings, checking they match the sensor layout row by row."""
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = set(MEASUREMENT_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(
            f"Measurement file lacks columns {sorted(missing)}."
        )
    expected = cfg.observation_table()
    if len(frame) != len(expected):
        raise ValueError(
            f"Measurement file has {len(frame)} rows, sensor layout "
            f"expects {len(expected)}."
        )
    if not np.array_equal(
        frame["sensor_id"].to_numpy(dtype=int),
        expected["sensor_id"].to_numpy(),
    ):
        raise ValueError("Measurement sensor ids do not match the layout.")
    for column in ("x", "y", "t"):
        if not np.allclose(
            frame[column].to_numpy(dtype=float),
            expected[column].to_numpy(),
            rtol=0.0,
            atol=tol,
        ):
            raise ValueError(
                f"Measurement column '{column}' does not match the layout."
            )
    values = frame["value"].to_numpy(dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("Measurement values must be finite.")
    return values
