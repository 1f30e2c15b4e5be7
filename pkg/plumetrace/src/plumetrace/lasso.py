"""Nonnegative lasso over source atoms.

Minimizes ||A lam - d||^2 / (2 sigma^2) + alpha * sum(lam) subject to
lam >= 0, where column j of A holds the readings of atom j at unit
intensity.
"""

import logging
from dataclasses import dataclass, field
from threading import Lock
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from plumetrace.errors import ConvergenceError
from plumetrace.fem import OperatorSet
from plumetrace.sensing import ObservationOperator
from plumetrace.sources import ShapeParams, ShapeProjector, assemble_W
from plumetrace.transport import TimeGrid, TransportSolver
from plumetrace.utils import parallel_map

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 500
Key = Tuple[int, int]


@dataclass(eq=False)
class InversionStack:
    """Everything needed to map atoms to readings and readings to duals."""

    ops: OperatorSet
    grid: TimeGrid
    obs: ObservationOperator
    shape: ShapeParams
    W: sparse.csc_matrix
    solver: TransportSolver
    projector: ShapeProjector
    threads: int = 1
    responses: "ImpulseResponses" = field(init=False)

    def __post_init__(self) -> None:
        if self.obs.n_dof != self.ops.n_dof or self.W.shape != (
            self.ops.n_dof,
            self.ops.n_dof,
        ):
            raise ValueError("Inversion operators live on different meshes.")
        if self.obs.grid != self.grid or self.solver.dt != self.grid.dt:
            raise ValueError("Inversion operators use different time grids.")
        self.responses = ImpulseResponses(self)

    @classmethod
    def build(
        cls,
        ops: OperatorSet,
        grid: TimeGrid,
        obs: ObservationOperator,
        shape: ShapeParams,
        threads: int = 1,
    ) -> "InversionStack":
        return cls(
            ops=ops,
            grid=grid,
            obs=obs,
            shape=shape,
            W=assemble_W(ops.mesh, ops.M, shape, threads),
            solver=TransportSolver(ops, grid.dt),
            projector=ShapeProjector(ops.mesh, ops.M, shape),
            threads=threads,
        )


class ImpulseResponses:
    """Fields of unit atoms released at step 0, cached per node.

    Operators do not change in time, so an atom released at step n has
    the same field delayed by n steps.
    """

    def __init__(self, stack: InversionStack) -> None:
        self._stack = stack
        self._responses: Dict[int, np.ndarray] = {}
        self._lock = Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._responses)

    def get(self, node: int) -> np.ndarray:
        with self._lock:
            response = self._responses.get(node)
        if response is not None:
            return response
        stack = self._stack
        source = stack.projector.project_node(node)[None, :]
        response = stack.solver.forward(source, stack.grid.n_steps)
        with self._lock:
            return self._responses.setdefault(node, response)

    def readings(self, key: Key) -> np.ndarray:
        step, node = key
        stack = self._stack
        levels = stack.grid.n_steps + 1
        if not 0 <= step < levels:
            raise ValueError(f"Atom step {step} outside the time grid.")
        response = self.get(node)
        stacked = np.zeros(levels * stack.ops.n_dof)
        stacked[step * stack.ops.n_dof :] = response[: levels - step].ravel()
        return stack.obs.matrix @ stacked


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    A: np.ndarray
    keys: Tuple[Key, ...]

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.A.shape[1] != len(self.keys):
            raise ValueError("Design matrix columns and atom keys disagree.")
        if not np.isfinite(self.A).all():
            raise ValueError("Design matrix contains non-finite values.")

    @property
    def n_atoms(self) -> int:
        return len(self.keys)

    def extended(self, other: "DesignMatrix") -> "DesignMatrix":
        return DesignMatrix(
            np.hstack([self.A, other.A]), self.keys + other.keys
        )

    def select(self, mask: np.ndarray) -> "DesignMatrix":
        keys = tuple(k for k, keep in zip(self.keys, mask) if keep)
        return DesignMatrix(self.A[:, mask], keys)


def build_design_matrix(
    keys: Sequence[Key], stack: InversionStack
) -> DesignMatrix:
    """Readings of unit atoms, one column per (step, node) key in order."""
    keys = tuple((int(n), int(j)) for n, j in keys)
    columns = parallel_map(stack.responses.readings, keys, stack.threads)
    A = (
        np.column_stack(columns)
        if columns
        else np.zeros((stack.obs.n_observations, 0))
    )
    logger.debug(
        f"Built {len(keys)} design columns, "
        f"{len(stack.responses)} impulse responses cached."
    )
    return DesignMatrix(A, keys)


@dataclass(frozen=True)
class LassoSolution:
    lam: np.ndarray
    kkt_residual: float
    objective_value: float
    iterations: int


Matrix = Union[np.ndarray, DesignMatrix]


def _dense(A: Matrix) -> np.ndarray:
    if isinstance(A, DesignMatrix):
        return A.A
    return np.atleast_2d(np.asarray(A, dtype=float))


def default_tolerance(d: np.ndarray, sigma: float) -> float:
    peak = float(np.abs(d).max()) if len(d) else 0.0
    return 1e-9 * (1.0 + peak / sigma**2)


def objective(
    A: Matrix, d: np.ndarray, sigma: float, alpha: float, lam: np.ndarray
) -> float:
    residual = _dense(A) @ lam - d
    return float(residual @ residual / (2 * sigma**2) + alpha * lam.sum())


def _violation(lam: np.ndarray, shifted: np.ndarray) -> np.ndarray:
    return np.where(lam > 0, np.abs(shifted), np.maximum(0.0, -shifted))


def kkt_residual(
    A: Matrix, d: np.ndarray, sigma: float, alpha: float, lam: np.ndarray
) -> float:
    A = _dense(A)
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return 0.0
    gradient = A.T @ (A @ lam - d) / sigma**2
    return float(_violation(lam, gradient + alpha).max())


class _Problem:
    """The lasso as the quadratic 0.5 x'Hx - b'x + alpha sum(x), x >= 0."""

    def __init__(
        self, A: np.ndarray, d: np.ndarray, sigma: float, alpha: float
    ) -> None:
        self.H = A.T @ A / sigma**2
        self.b = A.T @ d / sigma**2
        self.alpha = alpha
        self.scale = max(1.0, float(d @ d) / sigma**2)
        top = np.linalg.eigvalsh(self.H)[-1] if len(self.H) else 0.0
        self.step = 1.0 / top if top > 0 else 1.0

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.H @ x - self.b + self.alpha

    def change(self, x: np.ndarray, gradient: np.ndarray, y: np.ndarray):
        delta = y - x
        return float(gradient @ delta + 0.5 * delta @ self.H @ delta)

    def subspace_minimizer(
        self, x: np.ndarray, free: np.ndarray
    ) -> np.ndarray:
        """Newton point on the free coordinates, zero elsewhere."""
        z = np.where(free, x, 0.0)
        if free.any():
            local = self.H[np.ix_(free, free)]
            g = self.gradient(z)[free]
            z[free] += np.linalg.lstsq(local, -g, rcond=None)[0]
        return z


def _newton_candidate(
    problem: _Problem, x: np.ndarray, gradient: np.ndarray
) -> np.ndarray:
    free = x - problem.step * gradient > 0
    return np.maximum(problem.subspace_minimizer(x, free), 0.0)


def _active_set_candidate(
    problem: _Problem, x: np.ndarray, gradient: np.ndarray
) -> np.ndarray:
    free = x > 0
    entering = ~free & (gradient < 0)
    if entering.any():
        candidates = np.flatnonzero(entering)
        free[candidates[np.argmin(gradient[candidates])]] = True
    x = x.copy()
    for _ in range(len(x) + 1):
        if not free.any():
            break
        z = problem.subspace_minimizer(x, free)
        blocking = free & (z <= 0)
        if not blocking.any():
            return z
        gap = x[blocking] - z[blocking]
        ratios = np.where(
            gap > 0, x[blocking] / np.where(gap > 0, gap, 1.0), 0.0
        )
        x = x + ratios.min() * (z - x)
        x[~free] = 0.0
        x[blocking & (x <= 0)] = 0.0
        x[np.flatnonzero(blocking)[np.argmin(ratios)]] = 0.0
        free &= x > 0
    return np.maximum(x, 0.0)


def solve_nn_lasso(
    A: Matrix,
    d: np.ndarray,
    sigma: float,
    alpha: float,
    tol: Optional[float] = None,
    x0: Optional[np.ndarray] = None,
    max_iter: int = MAX_ITERATIONS,
) -> LassoSolution:
    """Semismooth Newton on the thresholded optimality system.

    Each iteration takes the Newton point of the active set predicted by
    a gradient step. If it does not decrease the objective, a primal
    active-set step is tried and, failing that, a projected gradient
    step.
    """
    A = _dense(A)
    d = np.asarray(d, dtype=float)
    if A.shape[0] != len(d):
        raise ValueError(
            f"Design matrix has {A.shape[0]} rows, data {len(d)} entries."
        )
    if not sigma > 0:
        raise ValueError(f"Noise level must be positive: {sigma}.")
    if alpha < 0:
        raise ValueError(f"Regularization must be nonnegative: {alpha}.")
    if tol is None:
        tol = default_tolerance(d, sigma)

    n = A.shape[1]
    x = np.zeros(n) if x0 is None else np.maximum(np.asarray(x0, float), 0)
    if x.shape != (n,):
        raise ValueError("Initial guess does not match the design matrix.")
    problem = _Problem(A, d, sigma, alpha)

    residual = 0.0
    for iteration in range(max_iter + 1):
        gradient = problem.gradient(x)
        residual = float(_violation(x, gradient).max()) if n else 0.0
        if residual <= tol:
            return LassoSolution(
                lam=x,
                kkt_residual=residual,
                objective_value=objective(A, d, sigma, alpha, x),
                iterations=iteration,
            )
        if iteration == max_iter:
            break

        slack = 1e-13 * problem.scale
        for propose in (_newton_candidate, _active_set_candidate):
            candidate = propose(problem, x, gradient)
            change = problem.change(x, gradient, candidate)
            if change < -slack or (
                change <= slack
                and np.any(candidate != x)
                and _violation(candidate, problem.gradient(candidate)).max()
                < residual
            ):
                x = candidate
                break
        else:
            x = np.maximum(x - problem.step * gradient, 0.0)

    raise ConvergenceError(
        f"Nonnegative lasso did not converge in {max_iter} iterations",
        residual,
    )


def projected_gradient(
    A: Matrix,
    d: np.ndarray,
    sigma: float,
    alpha: float,
    tol: float = 1e-12,
    x0: Optional[np.ndarray] = None,
    max_iter: int = 200_000,
) -> LassoSolution:
    """Plain projected gradient with step 1/L."""
    A = _dense(A)
    d = np.asarray(d, dtype=float)
    if not sigma > 0:
        raise ValueError(f"Noise level must be positive: {sigma}.")
    n = A.shape[1]
    x = np.zeros(n) if x0 is None else np.maximum(np.asarray(x0, float), 0)
    problem = _Problem(A, d, sigma, alpha)

    residual = 0.0
    for iteration in range(max_iter + 1):
        gradient = problem.gradient(x)
        residual = float(_violation(x, gradient).max()) if n else 0.0
        if residual <= tol:
            return LassoSolution(
                lam=x,
                kkt_residual=residual,
                objective_value=objective(A, d, sigma, alpha, x),
                iterations=iteration,
            )
        x = np.maximum(x - problem.step * gradient, 0.0)

    raise ConvergenceError(
        f"Projected gradient did not converge in {max_iter} iterations",
        residual,
    )
