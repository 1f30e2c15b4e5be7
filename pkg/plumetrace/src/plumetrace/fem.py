"""P1 finite element matrices with SUPG stabilization.

The wind enters the advection and streamline matrices through its value
at the element centroid. For P1 elements the Laplacian of the basis
vanishes elementwise, so the streamline matrix reduces to the Gram matrix
of streamline derivatives.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from plumetrace.mesh import BoundaryTag, Mesh
from plumetrace.wind import WindField

logger = logging.getLogger(__name__)

# symmetric 6-point rule of degree 4 on the reference triangle,
# barycentric points and weights summing to one
QUADRATURE_POINTS = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)
QUADRATURE_WEIGHTS = np.array(
    [0.223381589678011] * 3 + [0.109951743655322] * 3
)
QUADRATURE_WEIGHTS /= QUADRATURE_WEIGHTS.sum()


def quadrature_points(mesh: Mesh, triangles: np.ndarray = None) -> np.ndarray:
    """Physical quadrature points, shape (n_triangles, 6, 2)."""
    vertices = mesh.vertices if triangles is None else mesh.vertices[triangles]
    return np.einsum("qk,tkd->tqd", QUADRATURE_POINTS, vertices)


@dataclass(frozen=True, eq=False)
class OperatorSet:
    """Assembled matrices of one (mesh, wind, kappa) configuration.

    ``tau_S`` and ``tau_V`` are the elementwise tau-weighted sums of the
    streamline and advection element matrices. Boundary conditions are not
    applied here.
    """

    mesh: Mesh
    M: sparse.csr_matrix
    K: sparse.csr_matrix
    V: sparse.csr_matrix
    S: sparse.csr_matrix
    tau_S: sparse.csr_matrix
    tau_V: sparse.csr_matrix
    tau: np.ndarray
    kappa: float
    inflow_dofs: np.ndarray

    @property
    def n_dof(self) -> int:
        return self.mesh.n_nodes


def _scatter(mesh: Mesh, local: np.ndarray) -> sparse.csr_matrix:
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    return sparse.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(n, n)
    ).tocsr()


def stabilization_tau(
    diameters: np.ndarray, speeds: np.ndarray, kappa: float
) -> np.ndarray:
    diffusive = diameters**2 / (2 * kappa)
    safe = np.where(speeds > 0, speeds, 1.0)
    advective = np.where(speeds > 0, diameters / safe, np.inf)
    return np.minimum(diffusive, advective)


def assemble(mesh: Mesh, wind: WindField, kappa: float) -> OperatorSet:
    if kappa <= 0:
        raise ValueError(f"Diffusion coefficient must be positive: {kappa}.")
    if not mesh.is_classified:
        raise ValueError("Mesh boundary must be classified before assembly.")

    areas = mesh.areas
    grads = mesh.gradients
    velocity = wind.at(mesh.centroids)
    streamline = np.einsum("tkd,td->tk", grads, velocity)

    K_local = areas[:, None, None] * np.einsum("tid,tjd->tij", grads, grads)
    V_local = (areas / 3.0)[:, None, None] * np.broadcast_to(
        streamline[:, None, :], (mesh.n_triangles, 3, 3)
    )
    S_local = areas[:, None, None] * np.einsum(
        "ti,tj->tij", streamline, streamline
    )

    tau = stabilization_tau(
        mesh.diameters, np.linalg.norm(velocity, axis=1), kappa
    )
    inflow = mesh.nodes_with_tag(BoundaryTag.INFLOW)

    ops = OperatorSet(
        mesh=mesh,
        M=mass_matrix(mesh),
        K=_scatter(mesh, K_local),
        V=_scatter(mesh, V_local),
        S=_scatter(mesh, S_local),
        tau_S=_scatter(mesh, tau[:, None, None] * S_local),
        tau_V=_scatter(mesh, tau[:, None, None] * V_local),
        tau=tau,
        kappa=float(kappa),
        inflow_dofs=inflow,
    )
    peclet = cell_peclet(mesh, wind, kappa)
    logger.debug(
        f"Assembled {ops.n_dof} dofs, kappa={kappa:g}, "
        f"max cell Peclet {peclet.max():.3g}, "
        f"{len(inflow)} inflow nodes."
    )
    return ops


def cell_peclet(mesh: Mesh, wind: WindField, kappa: float) -> np.ndarray:
    """Element Peclet numbers |v| h_E / (2 kappa) at the centroids."""
    speeds = np.linalg.norm(wind.at(mesh.centroids), axis=1)
    return speeds * mesh.diameters / (2 * kappa)


def discrete_divergence_diagnostic(mesh: Mesh, wind: WindField) -> float:
    """Largest elementwise divergence of the P1 interpolant of the wind."""
    nodal = wind.at(mesh.nodes)[mesh.triangles]
    divergence = np.einsum("tkd,tkd->t", mesh.gradients, nodal)
    return float(np.abs(divergence).max())


def l2_error(
    mesh: Mesh,
    nodal: np.ndarray,
    function: Callable[[np.ndarray], np.ndarray],
) -> float:
    """L2 distance between a P1 field and a function, by quadrature."""
    points = quadrature_points(mesh)
    exact = function(points.reshape(-1, 2)).reshape(points.shape[:2])
    approx = np.einsum("qk,tk->tq", QUADRATURE_POINTS, nodal[mesh.triangles])
    squared = np.einsum(
        "q,tq->t", QUADRATURE_WEIGHTS, (approx - exact) ** 2
    )
    return float(np.sqrt(np.dot(mesh.areas, squared)))


def mass_matrix(mesh: Mesh) -> sparse.csr_matrix:
    mass = np.full((3, 3), 1.0 / 12.0) + np.eye(3) / 12.0
    return _scatter(mesh, mesh.areas[:, None, None] * mass)
