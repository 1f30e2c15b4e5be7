"""Sparse source reconstruction by primal-dual active point iterations.

Each iteration evaluates the dual field of the current source, inserts at
most one atom per time step where the dual exceeds the regularization,
re-optimizes all intensities and prunes negligible atoms. The run stops
once no atom qualifies for insertion.

The dual field takes the transport solver besides W and the adjoint: the
adjoint is turned into the source sensitivity before W is applied, so
the dual value of an atom is exactly its design column against the
misfit.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from scipy import sparse

from plumetrace.lasso import (
    DesignMatrix,
    InversionStack,
    build_design_matrix,
    objective,
    solve_nn_lasso,
)
from plumetrace.sensing import MeasurementSet, misfit
from plumetrace.sources import SourceAtomSet, atoms_to_source
from plumetrace.transport import SpaceTimeField, TransportSolver

logger = logging.getLogger(__name__)


class AlphaMode(str, Enum):
    ABSOLUTE = "absolute"
    RELATIVE = "relative"


@dataclass(frozen=True)
class PdapConfig:
    """Run parameters.

    In relative mode the regularization is ``alpha`` times the largest
    dual value of the zero source, the smallest weight for which the
    zero source is optimal. ``insert_tol`` defaults to 1e-3 of the
    effective weight, ``prune_tol`` to 1e-8 of the largest intensity.
    """

    alpha: float
    alpha_mode: AlphaMode = AlphaMode.ABSOLUTE
    insert_tol: Optional[float] = None
    prune_tol: Optional[float] = None
    max_iter: int = 100
    lasso_tol: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"Regularization must be positive: {self.alpha}.")
        if self.insert_tol is not None and self.insert_tol < 0:
            raise ValueError("Insertion tolerance must be nonnegative.")
        if self.prune_tol is not None and self.prune_tol < 0:
            raise ValueError("Pruning tolerance must be nonnegative.")
        if self.max_iter < 1:
            raise ValueError(f"Need at least one iteration: {self.max_iter}.")
        object.__setattr__(self, "alpha_mode", AlphaMode(self.alpha_mode))

    def effective_alpha(self, peak_dual: float) -> float:
        if self.alpha_mode is AlphaMode.RELATIVE and peak_dual > 0:
            return self.alpha * peak_dual
        return self.alpha

    def effective_insert_tol(self, alpha: float) -> float:
        if self.insert_tol is None:
            return 1e-3 * alpha
        return self.insert_tol

    def prune_threshold(self, intensities: np.ndarray) -> float:
        if self.prune_tol is not None:
            return self.prune_tol
        return 1e-8 * float(intensities.max()) if len(intensities) else 0.0


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    misfit_norm: float
    max_dual: float
    added: int
    pruned: int
    atoms: int
    lasso_iterations: int


@dataclass
class ReconstructionReport:
    atoms: SourceAtomSet
    history: List[IterationRecord]
    converged: bool
    iterations: int
    alpha: float
    insert_tol: float
    sigma: float
    dt: float
    predicted: np.ndarray
    relative_residual: float
    config: Dict[str, Any]
    forecast_error: Optional[float] = None
    extras: Dict[str, Any] = field(default_factory=dict)

    @property
    def objective_history(self) -> np.ndarray:
        return np.array([record.objective for record in self.history])

    def to_dict(self) -> Dict[str, Any]:
        atoms = [
            {
                "n": step,
                "t": step * self.dt,
                "node": node,
                "x": x,
                "y": y,
                "lambda": intensity,
            }
            for step, node, (x, y), intensity in zip(
                self.atoms.steps.tolist(),
                self.atoms.nodes.tolist(),
                self.atoms.positions.tolist(),
                self.atoms.intensities.tolist(),
            )
        ]
        trajectory = self.atoms.trajectory(self.dt)
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "alpha": self.alpha,
            "insert_tol": self.insert_tol,
            "sigma": self.sigma,
            "relative_residual": self.relative_residual,
            "forecast_error": self.forecast_error,
            "atoms": atoms,
            "trajectory": trajectory.to_dict(orient="records"),
            "history": [asdict(record) for record in self.history],
            "config": self.config,
            **self.extras,
        }


def dual_field(
    W: sparse.spmatrix, adjoint: SpaceTimeField, solver: TransportSolver
) -> np.ndarray:
    """phi[n, j]: descent potential of a unit atom at node j, step n.

    The adjoint is first mapped to the source sensitivity
    q^n = dt M^-1 B^T P p^n through ``solver``, and phi^n = -W^T q^n.
    This equals minus the design column of atom (n, j) tested against
    the misfit, so insertion and the lasso step see the same numbers.
    """
    if W.shape[0] != adjoint.values.shape[1]:
        raise ValueError("Dual operator and adjoint live on different meshes.")
    sensitivity = solver.sensitivity(adjoint.values)
    return -np.asarray(W.T @ sensitivity.T).T


def _relative_residual(predicted: np.ndarray, d: np.ndarray) -> float:
    scale = np.linalg.norm(d)
    residual = np.linalg.norm(predicted - d)
    return float(residual / scale) if scale > 0 else float(residual)


def pdap_run(
    stack: InversionStack, data: MeasurementSet, cfg: PdapConfig
) -> ReconstructionReport:
    if len(data.d) != stack.obs.n_observations:
        raise ValueError(
            f"Got {len(data.d)} measurements for "
            f"{stack.obs.n_observations} observations."
        )
    sigma = data.weight_sigma
    d = data.d
    design = DesignMatrix(np.zeros((len(d), 0)), ())
    lam = np.zeros(0)
    history: List[IterationRecord] = []
    alpha = insert_tol = None
    converged = False
    current = objective(design, d, sigma, cfg.alpha, lam)

    for iteration in range(1, cfg.max_iter + 1):
        predicted = design.A @ lam
        y = misfit(predicted, data, sigma_floor=sigma)
        loads = stack.obs.adjoint_loads(y)
        adjoint = SpaceTimeField(stack.solver.adjoint(loads), stack.grid)
        phi = dual_field(stack.W, adjoint, stack.solver)

        if alpha is None:
            alpha = cfg.effective_alpha(float(phi.max()))
            insert_tol = cfg.effective_insert_tol(alpha)
            current = objective(design, d, sigma, alpha, lam)
            logger.info(
                f"Regularization alpha={alpha:.6g}, "
                f"insertion tolerance {insert_tol:.3g}."
            )

        best = np.argmax(phi, axis=1)
        peaks = phi[np.arange(len(phi)), best]
        active = set(design.keys)
        new_keys = [
            (n, int(best[n]))
            for n in np.flatnonzero(peaks > alpha + insert_tol).tolist()
            if (n, int(best[n])) not in active
        ]
        max_dual = float(peaks.max())

        if not new_keys:
            converged = True
            history.append(
                IterationRecord(
                    iteration=iteration,
                    objective=current,
                    misfit_norm=float(np.linalg.norm(predicted - d)),
                    max_dual=max_dual,
                    added=0,
                    pruned=0,
                    atoms=design.n_atoms,
                    lasso_iterations=0,
                )
            )
            logger.info(
                f"Converged after {iteration} iterations with "
                f"{design.n_atoms} atoms, max dual {max_dual:.6g}."
            )
            break

        design = design.extended(build_design_matrix(new_keys, stack))
        x0 = np.concatenate([lam, np.zeros(len(new_keys))])
        solution = solve_nn_lasso(
            design, d, sigma, alpha, tol=cfg.lasso_tol, x0=x0
        )
        lam = solution.lam
        keep = (lam > 0) & (lam >= cfg.prune_threshold(lam))
        pruned = int(np.count_nonzero(~keep))
        design = design.select(keep)
        lam = lam[keep]
        current = objective(design, d, sigma, alpha, lam)

        record = IterationRecord(
            iteration=iteration,
            objective=current,
            misfit_norm=float(np.linalg.norm(design.A @ lam - d)),
            max_dual=max_dual,
            added=len(new_keys),
            pruned=pruned,
            atoms=design.n_atoms,
            lasso_iterations=solution.iterations,
        )
        history.append(record)
        logger.info(
            f"Iteration {iteration}: +{record.added} -{record.pruned} "
            f"atoms ({record.atoms} active), objective "
            f"{record.objective:.9g}, max dual {max_dual:.6g}."
        )
        logger.debug(
            f"Lasso finished in {solution.iterations} iterations, "
            f"KKT residual {solution.kkt_residual:.3g}."
        )

    if not converged:
        logger.warning(
            f"No convergence within {cfg.max_iter} iterations; "
            f"keeping the last iterate."
        )

    predicted = design.A @ lam
    atoms = SourceAtomSet.at_nodes(stack.ops.mesh, design.keys, lam)
    config = asdict(cfg)
    config["alpha_mode"] = cfg.alpha_mode.value
    return ReconstructionReport(
        atoms=atoms,
        history=history,
        converged=converged,
        iterations=len(history),
        alpha=float(alpha),
        insert_tol=float(insert_tol),
        sigma=float(sigma),
        dt=stack.grid.dt,
        predicted=predicted,
        relative_residual=_relative_residual(predicted, d),
        config=config,
    )


def predict(
    atoms: SourceAtomSet, stack: InversionStack, T_pred: float
) -> SpaceTimeField:
    """Forward field of the atoms over [0, T_pred]."""
    if T_pred < stack.grid.horizon * (1 - 1e-12):
        raise ValueError(
            f"Prediction horizon {T_pred:g} s is shorter than the "
            f"observation window {stack.grid.horizon:g} s."
        )
    grid = stack.grid.extended(T_pred)
    source = atoms_to_source(atoms, stack.projector, grid)
    values = stack.solver.forward(source.values, grid.n_steps)
    return SpaceTimeField(values, grid)


def relative_error(
    M: sparse.spmatrix, estimate: np.ndarray, reference: np.ndarray
) -> float:
    """Relative L2 error of nodal fields in the mass matrix norm."""
    error = estimate - reference
    norm = float(reference @ (M @ reference))
    value = float(error @ (M @ error))
    return float(np.sqrt(value / norm)) if norm > 0 else float(np.sqrt(value))
