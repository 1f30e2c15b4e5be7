import numpy as np
import pytest
from scipy import sparse

from plumetrace.fem import (
    assemble,
    cell_peclet,
    l2_error,
    mass_matrix,
    quadrature_points,
    stabilization_tau,
)
from plumetrace.mesh import build_mesh, classify_boundary, generate_rect_mesh
from plumetrace.wind import UniformWind


def boundary_product(mesh, a: np.ndarray, b: np.ndarray, wind) -> float:
    """Integral of (v.n) a_h b_h over the boundary for constant wind."""
    i, j = mesh.boundary_edges[:, 0], mesh.boundary_edges[:, 1]
    exact = (
        2 * a[i] * b[i] + a[i] * b[j] + a[j] * b[i] + 2 * a[j] * b[j]
    ) / 6
    vn = mesh.boundary_normals @ wind.velocity
    return float(np.sum(vn * mesh.boundary_lengths * exact))


class TestMassMatrix:
    def test_single_right_triangle(self):
        mesh = build_mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
        M = mass_matrix(mesh).toarray()
        area = 0.5
        assert np.allclose(np.diag(M), area / 6)
        assert np.allclose(M[~np.eye(3, dtype=bool)], area / 12)

    def test_properties(self):
        mesh = generate_rect_mesh(2, 1, 6, 3)
        M = mass_matrix(mesh)
        assert abs(M - M.T).max() <= 1e-15 * abs(M).max()
        assert (np.asarray(M.sum(axis=1)).ravel() > 0).all()
        assert M.sum() == pytest.approx(2.0, rel=1e-14)
        assert np.linalg.eigvalsh(M.toarray()).min() > 0


class TestStabilization:
    def test_advective_limit(self):
        tau = stabilization_tau(np.array([2.0]), np.array([1.0]), 0.01)
        assert tau[0] == pytest.approx(2.0)

    def test_no_wind_uses_diffusive_scale(self):
        tau = stabilization_tau(np.array([2.0]), np.array([0.0]), 0.01)
        assert tau[0] == pytest.approx(200.0)


class TestAssemble:
    @pytest.fixture(scope="class")
    def wind(self):
        return UniformWind(0.7, -0.4)

    @pytest.fixture(scope="class")
    def ops(self, wind):
        mesh = classify_boundary(generate_rect_mesh(1, 1, 5, 4), wind)
        return assemble(mesh, wind, 0.05)

    def test_constants_are_in_the_stiffness_kernel(self, ops):
        ones = np.ones(ops.n_dof)
        scale = abs(ops.K).max()
        assert np.abs(ops.K @ ones).max() <= 1e-12 * scale

    def test_stiffness_is_symmetric_semidefinite(self, ops):
        K = ops.K.toarray()
        assert np.allclose(K, K.T, atol=1e-14)
        assert np.linalg.eigvalsh(K).min() > -1e-12

    def test_streamline_matrix_is_a_gram_matrix(self, ops, rng):
        S = ops.S.toarray()
        assert np.allclose(S, S.T, atol=1e-14)
        for _ in range(10):
            x = rng.normal(size=ops.n_dof)
            assert x @ S @ x >= -1e-12

    def test_advection_green_identity(self, ops, wind, rng):
        for _ in range(5):
            a = rng.normal(size=ops.n_dof)
            b = rng.normal(size=ops.n_dof)
            left = a @ ((ops.V + ops.V.T) @ b)
            right = boundary_product(ops.mesh, a, b, wind)
            assert left == pytest.approx(right, rel=1e-10, abs=1e-12)

    def test_inflow_dofs(self, ops):
        inflow = ops.mesh.nodes[ops.inflow_dofs]
        # wind blows right and down: inflow enters on the left and top
        assert (
            np.isclose(inflow[:, 0], 0.0) | np.isclose(inflow[:, 1], 1.0)
        ).all()

    def test_deterministic(self, ops, wind):
        again = assemble(ops.mesh, wind, 0.05)
        for name in ("M", "K", "V", "S", "tau_S", "tau_V"):
            difference = getattr(ops, name) - getattr(again, name)
            assert sparse.csr_matrix(difference).count_nonzero() == 0

    def test_rejects_nonpositive_kappa(self, ops, wind):
        with pytest.raises(ValueError):
            assemble(ops.mesh, wind, 0.0)

    def test_rejects_unclassified_mesh(self, wind):
        with pytest.raises(ValueError, match="classified"):
            assemble(generate_rect_mesh(1, 1, 2, 2), wind, 0.1)

    def test_peclet(self, ops, wind):
        peclet = cell_peclet(ops.mesh, wind, 0.05)
        speed = np.linalg.norm(wind.velocity)
        assert np.allclose(peclet, speed * ops.mesh.diameters / 0.1)


class TestQuadrature:
    def test_points_lie_in_their_triangles(self):
        mesh = generate_rect_mesh(1, 1, 2, 2)
        points = quadrature_points(mesh, np.array([3]))
        assert points.shape == (1, 6, 2)
        assert np.allclose(points.mean(axis=1), mesh.centroids[3])

    def test_l2_error_of_exact_linear_field(self):
        mesh = generate_rect_mesh(1, 1, 3, 3)
        nodal = mesh.nodes[:, 0] + 2 * mesh.nodes[:, 1]
        error = l2_error(mesh, nodal, lambda p: p[:, 0] + 2 * p[:, 1])
        assert error == pytest.approx(0.0, abs=1e-14)

    def test_l2_error_of_constant_offset(self):
        mesh = generate_rect_mesh(2, 1, 3, 3)
        error = l2_error(mesh, np.ones(mesh.n_nodes), lambda p: p[:, 0] * 0)
        assert error == pytest.approx(np.sqrt(2.0), rel=1e-12)
