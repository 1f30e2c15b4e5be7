"""Source terms: the capped radial shape, curves and atom sets.

A source is discretized per time step as a nodal vector. Atoms sit on
mesh nodes and carry the L2 projection of the shape function centred at
their node.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from threading import Lock
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu

from plumetrace.fem import QUADRATURE_POINTS, QUADRATURE_WEIGHTS
from plumetrace.fem import quadrature_points
from plumetrace.mesh import Mesh, locate
from plumetrace.transport import TimeGrid
from plumetrace.utils import parallel_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShapeParams:
    r: float
    eps: float
    cap: float = 0.5
    trunc_tol: float = 1e-10

    def __post_init__(self) -> None:
        if not self.r > 0:
            raise ValueError(f"Source radius must be positive: {self.r}.")
        if not 0 < self.eps < 1:
            raise ValueError(f"Threshold must lie in (0, 1): {self.eps}.")
        if not 0 < self.cap <= 1:
            raise ValueError(f"Cap must lie in (0, 1]: {self.cap}.")
        if not 0 < self.trunc_tol < 1:
            raise ValueError(
                f"Truncation threshold must lie in (0, 1): {self.trunc_tol}."
            )

    @property
    def support_radius(self) -> float:
        """Distance beyond which the shape drops below ``trunc_tol``."""
        return self.r * np.sqrt(np.log(self.trunc_tol) / np.log(self.eps))


def shape_omega(x_s: np.ndarray, y: np.ndarray, p: ShapeParams) -> np.ndarray:
    """min(cap, exp(ln(eps) |y - x_s|^2 / r^2)), so the value at r is eps."""
    offset = np.asarray(y, dtype=float) - np.asarray(x_s, dtype=float)
    d2 = np.sum(offset**2, axis=-1)
    return np.minimum(p.cap, np.exp(np.log(p.eps) * d2 / p.r**2))


def project_function(
    mesh: Mesh,
    M: sparse.spmatrix,
    function: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """L2 projection of a function onto the P1 space."""
    points = quadrature_points(mesh)
    values = function(points.reshape(-1, 2)).reshape(points.shape[:2])
    local = np.einsum(
        "t,q,qk,tq->tk",
        mesh.areas,
        QUADRATURE_WEIGHTS,
        QUADRATURE_POINTS,
        values,
    )
    load = np.zeros(mesh.n_nodes)
    np.add.at(load, mesh.triangles, local)
    return splu(sparse.csc_matrix(M)).solve(load)


class ShapeProjector:
    """L2 projections of shapes sharing one mass matrix factorization.

    Load vectors are cached per node.
    """

    def __init__(self, mesh: Mesh, M: sparse.spmatrix, p: ShapeParams):
        self.mesh = mesh
        self.M = sparse.csc_matrix(M)
        self.params = p
        self._loads: Dict[int, sparse.csc_matrix] = {}
        self._lock = Lock()

    @cached_property
    def _lu(self):
        return splu(self.M)

    def load(self, x_s: np.ndarray) -> np.ndarray:
        """b_i = integral of phi_i times the shape, truncated at trunc_tol."""
        p = self.params
        triangles = self.mesh.triangles_near(x_s, p.support_radius)
        load = np.zeros(self.mesh.n_nodes)
        if len(triangles) == 0:
            return load
        points = quadrature_points(self.mesh, triangles)
        values = shape_omega(x_s, points, p)
        values[values < p.trunc_tol] = 0.0
        local = np.einsum(
            "t,q,qk,tq->tk",
            self.mesh.areas[triangles],
            QUADRATURE_WEIGHTS,
            QUADRATURE_POINTS,
            values,
        )
        np.add.at(load, self.mesh.triangles[triangles], local)
        return load

    def node_load(self, node: int) -> sparse.csc_matrix:
        with self._lock:
            cached = self._loads.get(node)
        if cached is not None:
            return cached
        column = sparse.csc_matrix(self.load(self.mesh.nodes[node])[:, None])
        with self._lock:
            return self._loads.setdefault(node, column)

    def _solve(self, load: np.ndarray) -> np.ndarray:
        with self._lock:
            return self._lu.solve(load)

    def project(self, x_s: np.ndarray) -> np.ndarray:
        return self._solve(self.load(x_s))

    def project_node(self, node: int) -> np.ndarray:
        return self._solve(self.node_load(node).toarray().ravel())


def project_shape(
    mesh: Mesh, M: sparse.spmatrix, x_s: np.ndarray, p: ShapeParams
) -> np.ndarray:
    triangles, _ = locate(mesh, x_s)
    if triangles[0] < 0:
        raise ValueError(f"Source centre {tuple(x_s)} lies outside the mesh.")
    return ShapeProjector(mesh, M, p).project(np.asarray(x_s, dtype=float))


@dataclass(frozen=True, eq=False)
class ParameterCurve:
    """Piecewise linear intensity and location, zero outside the window."""

    times: np.ndarray
    intensities: np.ndarray
    locations: np.ndarray
    window: Tuple[float, float]

    def __post_init__(self) -> None:
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        intensities = np.atleast_1d(np.asarray(self.intensities, dtype=float))
        locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        if len(times) == 0:
            raise ValueError("Curve needs at least one breakpoint.")
        if intensities.shape != times.shape or locations.shape != (
            len(times),
            2,
        ):
            raise ValueError("Curve breakpoints have inconsistent shapes.")
        if np.any(np.diff(times) < 0):
            raise ValueError("Curve breakpoints must be sorted in time.")
        if np.any(intensities < 0) or not np.isfinite(intensities).all():
            raise ValueError("Curve intensities must be finite and >= 0.")
        t_on, t_off = self.window
        if not t_on <= t_off:
            raise ValueError(f"Invalid activity window {self.window}.")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "intensities", intensities)
        object.__setattr__(self, "locations", locations)
        object.__setattr__(self, "window", (float(t_on), float(t_off)))

    @classmethod
    def static(
        cls,
        location: Sequence[float],
        intensity: float,
        window: Tuple[float, float],
    ) -> "ParameterCurve":
        return cls(
            times=np.array([window[0]]),
            intensities=np.array([intensity]),
            locations=np.array([location]),
            window=window,
        )

    def active(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        slack = 1e-9 * max(1.0, abs(self.window[1]))
        return (t >= self.window[0] - slack) & (t <= self.window[1] + slack)

    def intensity(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        value = np.interp(t, self.times, self.intensities)
        return np.where(self.active(t), value, 0.0)

    def location(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack(
            [
                np.interp(t, self.times, self.locations[:, 0]),
                np.interp(t, self.times, self.locations[:, 1]),
            ],
            axis=-1,
        )


@dataclass(frozen=True, eq=False)
class SourceField:
    """Nodal source per time level; level n drives the step n -> n + 1."""

    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or len(self.values) != self.grid.n_steps + 1:
            raise ValueError(
                f"Source needs {self.grid.n_steps + 1} time levels, "
                f"got shape {self.values.shape}."
            )
        if not np.isfinite(self.values).all():
            raise ValueError("Source contains non-finite values.")

    @classmethod
    def zeros(cls, n_dof: int, grid: TimeGrid) -> "SourceField":
        return cls(np.zeros((grid.n_steps + 1, n_dof)), grid)


@dataclass(frozen=True, eq=False)
class SourceAtomSet:
    """Atoms given by time step, mesh node, position and intensity."""

    steps: np.ndarray
    nodes: np.ndarray
    positions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self) -> None:
        steps = np.asarray(self.steps, dtype=int).reshape(-1)
        nodes = np.asarray(self.nodes, dtype=int).reshape(-1)
        positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        intensities = np.asarray(self.intensities, dtype=float).reshape(-1)
        if not (
            len(steps) == len(nodes) == len(positions) == len(intensities)
        ):
            raise ValueError("Atom arrays have inconsistent lengths.")
        if np.any(intensities < 0):
            raise ValueError("Atom intensities must be nonnegative.")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "intensities", intensities)

    @classmethod
    def empty(cls) -> "SourceAtomSet":
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def at_nodes(
        cls,
        mesh: Mesh,
        keys: Sequence[Tuple[int, int]],
        intensities: Optional[np.ndarray] = None,
    ) -> "SourceAtomSet":
        keys = np.asarray(keys, dtype=int).reshape(-1, 2)
        if intensities is None:
            intensities = np.ones(len(keys))
        return cls(keys[:, 0], keys[:, 1], mesh.nodes[keys[:, 1]], intensities)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def keys(self) -> list:
        return list(zip(self.steps.tolist(), self.nodes.tolist()))

    def with_intensities(self, intensities: np.ndarray) -> "SourceAtomSet":
        return SourceAtomSet(
            self.steps, self.nodes, self.positions, intensities
        )

    def select(self, mask: np.ndarray) -> "SourceAtomSet":
        return SourceAtomSet(
            self.steps[mask],
            self.nodes[mask],
            self.positions[mask],
            self.intensities[mask],
        )

    def trajectory(self, dt: float) -> pd.DataFrame:
        """Per active step: intensity-weighted atom centroid and total."""
        columns = ["step", "t", "x", "y", "intensity"]
        if len(self) == 0:
            return pd.DataFrame(columns=columns)
        frame = pd.DataFrame(
            {
                "step": self.steps,
                "wx": self.positions[:, 0] * self.intensities,
                "wy": self.positions[:, 1] * self.intensities,
                "intensity": self.intensities,
            }
        )
        grouped = frame.groupby("step", sort=True).sum()
        grouped = grouped[grouped["intensity"] > 0]
        result = pd.DataFrame(
            {
                "step": grouped.index.to_numpy(dtype=int),
                "t": grouped.index.to_numpy(dtype=float) * dt,
                "x": (grouped["wx"] / grouped["intensity"]).to_numpy(),
                "y": (grouped["wy"] / grouped["intensity"]).to_numpy(),
                "intensity": grouped["intensity"].to_numpy(),
            }
        )
        return result[columns].reset_index(drop=True)


def sample_curve(
    curve: ParameterCurve,
    grid: TimeGrid,
    p: ShapeParams,
    mesh: Mesh,
    M: sparse.spmatrix,
) -> SourceField:
    times = grid.times
    intensity = curve.intensity(times)
    locations = curve.location(times)
    active = np.flatnonzero(intensity > 0)
    if len(active):
        triangles, _ = locate(mesh, locations[active])
        if (triangles < 0).any():
            raise ValueError("Source curve leaves the domain.")
    projector = ShapeProjector(mesh, M, p)
    values = np.zeros((len(times), mesh.n_nodes))
    for n in active:
        values[n] = intensity[n] * projector.project(locations[n])
    return SourceField(values, grid)


def atoms_to_source(
    atoms: SourceAtomSet, projector: ShapeProjector, grid: TimeGrid
) -> SourceField:
    values = np.zeros((grid.n_steps + 1, projector.mesh.n_nodes))
    steps = atoms.steps
    if len(steps) and (steps.min() < 0 or steps.max() > grid.n_steps):
        raise ValueError("Atom time steps exceed the time grid.")
    for step, node, intensity in zip(
        atoms.steps.tolist(), atoms.nodes.tolist(), atoms.intensities.tolist()
    ):
        if intensity != 0:
            values[step] += intensity * projector.project_node(node)
    return SourceField(values, grid)


def assemble_W(
    mesh: Mesh, M: sparse.spmatrix, p: ShapeParams, threads: int = 1
) -> sparse.csc_matrix:
    """Column j is the truncated shape load of node j, i.e. M f_j."""
    projector = ShapeProjector(mesh, M, p)
    columns = parallel_map(projector.node_load, range(mesh.n_nodes), threads)
    W = sparse.hstack(columns, format="csc")
    logger.debug(
        f"Assembled dual operator with {W.nnz} nonzeros "
        f"({W.nnz / max(mesh.n_nodes, 1):.1f} per column)."
    )
    return W
