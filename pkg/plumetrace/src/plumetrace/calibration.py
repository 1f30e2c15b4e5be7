"""Diffusion coefficient calibration against line readings.

Every candidate kappa gets its own steady solve. Simulated values are
sampled on a line of equally spaced points and compared to each reading
series by the mean squared difference.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from plumetrace.fem import assemble
from plumetrace.mesh import Mesh, interpolate, locate
from plumetrace.transport import solve_steady
from plumetrace.utils import parallel_map
from plumetrace.wind import WindField

logger = logging.getLogger(__name__)

READING_COLUMNS = ["point_id", "x", "y", "series", "value"]
TABLE_COLUMNS = ["kappa", "series", "pi"]


@dataclass(frozen=True)
class CandidateGrid:
    kappas: Tuple[float, ...]

    def __post_init__(self) -> None:
        kappas = tuple(float(k) for k in self.kappas)
        if not kappas:
            raise ValueError("Candidate grid is empty.")
        if any(not k > 0 for k in kappas):
            raise ValueError("Candidate diffusion coefficients must be > 0.")
        if any(b <= a for a, b in zip(kappas, kappas[1:])):
            raise ValueError("Candidate grid must be strictly ascending.")
        object.__setattr__(self, "kappas", kappas)

    def __len__(self) -> int:
        return len(self.kappas)


def default_kappa_grid() -> CandidateGrid:
    return CandidateGrid(tuple(10.0**i for i in range(-5, 1)))


@dataclass(frozen=True, eq=False)
class ExperimentalReadings:
    points: np.ndarray
    series: Dict[str, np.ndarray]

    def __post_init__(self) -> None:
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        series = {
            name: np.asarray(values, dtype=float)
            for name, values in self.series.items()
        }
        for name, values in series.items():
            if values.shape != (len(points),):
                raise ValueError(
                    f"Series '{name}' has {values.size} readings "
                    f"for {len(points)} points."
                )
            if not np.isfinite(values).all():
                raise ValueError(f"Series '{name}' has non-finite values.")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "series", series)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "ExperimentalReadings":
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = set(READING_COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"Readings file lacks columns {sorted(missing)}.")
        frame["series"] = frame["series"].astype(str)
        points = (
            frame.groupby("point_id", sort=True)[["x", "y"]]
            .first()
            .sort_index()
        )
        if list(points.index) != list(range(len(points))):
            raise ValueError("Reading point ids must be 0, 1, 2, ...")
        series = {}
        for name, group in frame.groupby("series", sort=False):
            group = group.sort_values("point_id")
            if group["point_id"].tolist() != list(range(len(points))):
                raise ValueError(
                    f"Series '{name}' must have one reading per point."
                )
            series[name] = group["value"].to_numpy(dtype=float)
        return cls(points.to_numpy(dtype=float), series)

    def to_csv(self, path: Union[str, Path]) -> None:
        rows = [
            (index, x, y, name, value)
            for name, values in self.series.items()
            for index, ((x, y), value) in enumerate(
                zip(self.points.tolist(), values.tolist())
            )
        ]
        frame = pd.DataFrame(rows, columns=READING_COLUMNS)
        frame.to_csv(path, index=False, float_format="%.17g")


def line_points(
    start: Sequence[float],
    direction: Sequence[float],
    length: float,
    n_p: int,
) -> np.ndarray:
    if n_p < 2:
        raise ValueError(f"Need at least two sample points: {n_p}.")
    direction = np.asarray(direction, dtype=float)
    norm = np.linalg.norm(direction)
    if norm == 0:
        raise ValueError("Sample line direction must be nonzero.")
    offsets = np.linspace(0.0, length, n_p)
    return np.asarray(start, dtype=float) + offsets[:, None] * (
        direction / norm
    )


def sample_line(
    mesh: Mesh,
    field: np.ndarray,
    start: Sequence[float],
    direction: Sequence[float],
    length: float,
    n_p: int,
) -> np.ndarray:
    """P1 values at n_p equally spaced points from start along direction."""
    return interpolate(
        mesh, field, line_points(start, direction, length, n_p)
    )


def cost_pi(simulated: np.ndarray, experimental: np.ndarray) -> float:
    simulated = np.asarray(simulated, dtype=float)
    experimental = np.asarray(experimental, dtype=float)
    if simulated.shape != experimental.shape:
        raise ValueError(
            f"Simulated ({simulated.size}) and experimental "
            f"({experimental.size}) lengths differ."
        )
    return float(np.mean((simulated - experimental) ** 2))


def nodes_in_disc(
    mesh: Mesh, center: Sequence[float], radius: float
) -> np.ndarray:
    distance = np.linalg.norm(mesh.nodes - np.asarray(center), axis=1)
    nodes = np.flatnonzero(distance <= radius)
    if len(nodes) == 0:
        raise ValueError(
            f"No mesh node within {radius:g} of {tuple(center)}."
        )
    return nodes


@dataclass(frozen=True, eq=False)
class CalibrationSetup:
    """Steady scenario: classified mesh, wind, sources and sample line."""

    mesh: Mesh
    wind: WindField
    volumetric_source: np.ndarray
    patches: Tuple[Tuple[np.ndarray, float], ...]
    start: Tuple[float, float]
    direction: Tuple[float, float]
    length: float
    n_points: int

    @property
    def points(self) -> np.ndarray:
        return line_points(
            self.start, self.direction, self.length, self.n_points
        )

    def simulate(self, kappa: float) -> np.ndarray:
        ops = assemble(self.mesh, self.wind, kappa)
        field = solve_steady(ops, self.volumetric_source, self.patches)
        return sample_line(
            self.mesh,
            field,
            self.start,
            self.direction,
            self.length,
            self.n_points,
        )


@dataclass(frozen=True, eq=False)
class SweepResult:
    table: pd.DataFrame
    best: Dict[str, float]
    samples: Dict[float, np.ndarray]

    def summary(self) -> Dict[str, Dict[str, float]]:
        return {
            name: {
                "kappa": kappa,
                "pi": float(
                    self.table[
                        (self.table["series"] == name)
                        & (self.table["kappa"] == kappa)
                    ]["pi"].iloc[0]
                ),
            }
            for name, kappa in self.best.items()
        }


def sweep_kappa(
    setup: CalibrationSetup,
    grid: CandidateGrid,
    readings: ExperimentalReadings,
    threads: int = 1,
    tol: float = 1e-9,
) -> SweepResult:
    if readings.n_points != setup.n_points:
        raise ValueError(
            f"Readings have {readings.n_points} points, "
            f"sample line has {setup.n_points}."
        )
    if not np.allclose(readings.points, setup.points, rtol=0.0, atol=tol):
        raise ValueError("Reading points do not lie on the sample line.")
    triangles, _ = locate(setup.mesh, setup.points)
    if (triangles < 0).any():
        raise ValueError("Sample line leaves the domain.")

    profiles = parallel_map(setup.simulate, grid.kappas, threads)
    rows: List[Tuple[float, str, float]] = []
    best: Dict[str, float] = {}
    for name, values in readings.series.items():
        costs = [cost_pi(profile, values) for profile in profiles]
        rows.extend(
            (kappa, name, cost) for kappa, cost in zip(grid.kappas, costs)
        )
        best[name] = grid.kappas[int(np.argmin(costs))]
        logger.info(
            f"Series '{name}': best kappa {best[name]:g} "
            f"(Pi = {min(costs):.6g})."
        )
    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    return SweepResult(
        table=table, best=best, samples=dict(zip(grid.kappas, profiles))
    )
