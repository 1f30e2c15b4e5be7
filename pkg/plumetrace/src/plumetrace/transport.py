"""Implicit Euler transport solves sharing one sparse factorization.

The forward recursion for steps n = 0 .. N-1 is

    A u^{n+1} = P B (u^n + dt m^n),    u^0 = 0,

with A = M + dt V + dt kappa K + dt tau_S + tau_V^T, B = M + tau_V^T,
and P zeroing the inflow rows, whose matrix rows are replaced by the
identity. The adjoint marches backward with the exact transpose

    A^T p^n = B^T P p^{n+1} + w^{n+1},    p^N = 0,

where w^n is the misfit load of step n. With these conventions
<G(m), y> = sum_n dt (m^n)^T B^T P p^n exactly.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from threading import Lock
from typing import TYPE_CHECKING, Iterable, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from plumetrace.errors import SingularSystemError
from plumetrace.fem import OperatorSet

if TYPE_CHECKING:
    from plumetrace.sensing import ObservationOperator
    from plumetrace.sources import SourceField

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"Time step must be positive: {self.dt}.")
        if self.n_steps < 1:
            raise ValueError(f"Need at least one time step: {self.n_steps}.")

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def extended(self, horizon: float) -> "TimeGrid":
        """Grid with the same step covering at least ``horizon``."""
        steps = int(np.ceil(horizon / self.dt - 1e-9))
        return TimeGrid(dt=self.dt, n_steps=max(steps, self.n_steps))


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    values: np.ndarray
    grid: TimeGrid

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or len(self.values) != self.grid.n_steps + 1:
            raise ValueError(
                f"Field needs {self.grid.n_steps + 1} time levels, "
                f"got shape {self.values.shape}."
            )
        if not np.isfinite(self.values).all():
            raise ValueError("Field contains non-finite values.")

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def stacked(self) -> np.ndarray:
        return self.values.ravel()

    def restrict(self, n_steps: int) -> "SpaceTimeField":
        return SpaceTimeField(
            values=self.values[: n_steps + 1],
            grid=TimeGrid(dt=self.grid.dt, n_steps=n_steps),
        )


@dataclass
class SolveStatistics:
    factorizations: int = 0
    solves: int = 0
    transpose_solves: int = 0
    _lock: Lock = field(default_factory=Lock, repr=False, compare=False)

    def count(self, attribute: str) -> None:
        with self._lock:
            setattr(self, attribute, getattr(self, attribute) + 1)


def _factorize(matrix: sparse.spmatrix, statistics: SolveStatistics):
    try:
        lu = splu(sparse.csc_matrix(matrix))
    except RuntimeError as e:
        raise SingularSystemError(f"Factorization failed: {e}") from e
    statistics.count("factorizations")
    return lu


def _checked(
    matrix: sparse.spmatrix,
    solution: np.ndarray,
    rhs: np.ndarray,
    step: Optional[int],
) -> np.ndarray:
    if not np.isfinite(solution).all():
        raise SingularSystemError("Solve produced non-finite values", step)
    scale = np.linalg.norm(rhs)
    if scale == 0:
        return solution
    residual = np.linalg.norm(matrix @ solution - rhs) / scale
    if residual > RESIDUAL_TOLERANCE:
        raise SingularSystemError(
            f"Relative residual {residual:.2e} exceeds tolerance", step
        )
    return solution


class TransportSolver:
    """Time-stepping solver for one operator set and one step size.

    The system matrix is factorized once; forward steps use the factors
    directly and adjoint steps use transposed solves of the same factors.
    ``forward`` may be called from several threads; solves against the
    shared factors are serialized.
    """

    def __init__(self, ops: OperatorSet, dt: float) -> None:
        if not dt > 0:
            raise ValueError(f"Time step must be positive: {dt}.")
        self.ops = ops
        self.dt = float(dt)
        self.statistics = SolveStatistics()

        keep = np.ones(ops.n_dof)
        keep[ops.inflow_dofs] = 0.0
        self._keep = keep
        dirichlet = sparse.diags(1.0 - keep)

        raw = (
            ops.M
            + self.dt * ops.V
            + (self.dt * ops.kappa) * ops.K
            + self.dt * ops.tau_S
            + ops.tau_V.T
        )
        self.raw_system = raw.tocsr()
        system = sparse.diags(keep) @ raw + dirichlet
        system.eliminate_zeros()
        self.forward_system = system.tocsr()
        self.adjoint_system = self.forward_system.T.tocsr()
        self.load = (ops.M + ops.tau_V.T).tocsr()
        self.adjoint_load = self.load.T.tocsr()
        self._lu = _factorize(self.forward_system, self.statistics)
        self._solve_lock = Lock()

    @cached_property
    def _mass_lu(self):
        return _factorize(self.ops.M, self.statistics)

    def _step(self, rhs: np.ndarray, step: int) -> np.ndarray:
        self.statistics.count("solves")
        with self._solve_lock:
            solution = self._lu.solve(rhs)
        return _checked(self.forward_system, solution, rhs, step)

    def _transpose_step(self, rhs: np.ndarray, step: int) -> np.ndarray:
        self.statistics.count("transpose_solves")
        with self._solve_lock:
            solution = self._lu.solve(rhs, trans="T")
        return _checked(self.adjoint_system, solution, rhs, step)

    def forward(self, source: np.ndarray, n_steps: int) -> np.ndarray:
        """Returns the (n_steps + 1, n_dof) states for nodal sources.

        ``source[n]`` drives step n -> n + 1; missing trailing steps are
        treated as zero.
        """
        source = np.asarray(source, dtype=float)
        states = np.zeros((n_steps + 1, self.ops.n_dof))
        for n in range(n_steps):
            current = states[n]
            if n < len(source) and source[n].any():
                current = current + self.dt * source[n]
            elif not current.any():
                continue
            rhs = self._keep * (self.load @ current)
            states[n + 1] = self._step(rhs, n + 1)
        return states

    def adjoint(self, loads: np.ndarray) -> np.ndarray:
        """Returns the (N + 1, n_dof) adjoint states for misfit loads."""
        n_steps = len(loads) - 1
        states = np.zeros_like(loads, dtype=float)
        for n in range(n_steps - 1, -1, -1):
            following = states[n + 1]
            rhs = loads[n + 1].astype(float)
            if following.any():
                rhs = rhs + self.adjoint_load @ (self._keep * following)
            elif not rhs.any():
                continue
            states[n] = self._transpose_step(rhs, n)
        return states

    def sensitivity(self, adjoint: np.ndarray) -> np.ndarray:
        """Per-step vectors q^n with <G(m), y> = sum_n (m^n)^T M q^n."""
        weighted = self.adjoint_load @ (self._keep[:, None] * adjoint.T)
        weighted = np.asarray(weighted) * self.dt
        with self._solve_lock:
            solved = self._mass_lu.solve(weighted)
        return np.asarray(solved).T


def solve_forward(
    ops: OperatorSet, source: "SourceField", grid: TimeGrid
) -> SpaceTimeField:
    if source.values.shape[1] != ops.n_dof:
        raise ValueError("Source and operators live on different meshes.")
    solver = TransportSolver(ops, grid.dt)
    return SpaceTimeField(solver.forward(source.values, grid.n_steps), grid)


def solve_steady(
    ops: OperatorSet,
    volumetric_source: np.ndarray,
    dirichlet_patches: Iterable[Tuple[np.ndarray, float]] = (),
    statistics: Optional[SolveStatistics] = None,
) -> np.ndarray:
    """Solves (V + kappa K + tau_S) c = M f with Dirichlet rows replaced.

    Inflow nodes are fixed to zero; later patches override earlier ones.
    """
    volumetric_source = np.asarray(volumetric_source, dtype=float)
    if len(volumetric_source) != ops.n_dof:
        raise ValueError("Source and operators live on different meshes.")
    statistics = statistics or SolveStatistics()

    fixed = np.zeros(ops.n_dof, dtype=bool)
    values = np.zeros(ops.n_dof)
    fixed[ops.inflow_dofs] = True
    for nodes, value in dirichlet_patches:
        nodes = np.asarray(nodes, dtype=int)
        if len(nodes) and (nodes.min() < 0 or nodes.max() >= ops.n_dof):
            raise ValueError("Dirichlet patch references unknown nodes.")
        fixed[nodes] = True
        values[nodes] = value

    keep = (~fixed).astype(float)
    matrix = ops.V + ops.kappa * ops.K + ops.tau_S
    matrix = (sparse.diags(keep) @ matrix + sparse.diags(1.0 - keep)).tocsr()
    rhs = np.where(fixed, values, ops.M @ volumetric_source)
    lu = _factorize(matrix, statistics)
    statistics.count("solves")
    return _checked(matrix, lu.solve(rhs), rhs, None)


def solve_adjoint(
    ops: OperatorSet,
    misfit: np.ndarray,
    obs: "ObservationOperator",
    grid: TimeGrid,
) -> SpaceTimeField:
    loads = obs.adjoint_loads(misfit)
    solver = TransportSolver(ops, grid.dt)
    return SpaceTimeField(solver.adjoint(loads), grid)


def source_sensitivity(
    ops: OperatorSet, adjoint: SpaceTimeField
) -> SpaceTimeField:
    """Per-step q^n with <G(m), y> = sum_n (m^n)^T M q^n for the adjoint."""
    solver = TransportSolver(ops, adjoint.grid.dt)
    return SpaceTimeField(solver.sensitivity(adjoint.values), adjoint.grid)
