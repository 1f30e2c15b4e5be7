import numpy as np
import pytest

from plumetrace.errors import ConvergenceError
from plumetrace.lasso import (
    DesignMatrix,
    InversionStack,
    build_design_matrix,
    kkt_residual,
    objective,
    projected_gradient,
    solve_nn_lasso,
)
from plumetrace.sensing import assemble_observation
from plumetrace.sources import ShapeParams, SourceAtomSet, atoms_to_source
from plumetrace.transport import solve_forward


@pytest.fixture(scope="module")
def stack(small_ops, short_grid, small_sensors):
    obs = assemble_observation(small_ops.mesh, short_grid, small_sensors)
    shape = ShapeParams(r=0.15, eps=1e-3)
    return InversionStack.build(small_ops, short_grid, obs, shape)


class TestClosedForms:
    def test_scalar_soft_threshold(self):
        solution = solve_nn_lasso(np.array([[1.0]]), np.array([2.0]), 1, 0.5)
        assert solution.lam == pytest.approx([1.5])

    def test_threshold_above_the_data(self):
        solution = solve_nn_lasso(np.array([[1.0]]), np.array([2.0]), 1, 3.0)
        assert solution.lam == pytest.approx([0.0])

    def test_no_regularization(self):
        solution = solve_nn_lasso(np.array([[1.0]]), np.array([2.0]), 1, 0.0)
        assert solution.lam == pytest.approx([2.0])

    def test_identity_clips_negative_data(self):
        solution = solve_nn_lasso(np.eye(2), np.array([2.0, -1.0]), 1, 0.0)
        assert np.allclose(solution.lam, [2.0, 0.0])

    def test_sigma_scales_the_misfit(self):
        solution = solve_nn_lasso(
            np.array([[1.0]]), np.array([2.0]), 2.0, 0.25
        )
        # gradient (lam - 2) / 4 + 0.25 vanishes at lam = 1
        assert solution.lam == pytest.approx([1.0])

    def test_empty_design(self):
        solution = solve_nn_lasso(np.zeros((3, 0)), np.ones(3), 1.0, 0.1)
        assert solution.lam.shape == (0,)
        assert solution.objective_value == pytest.approx(1.5)


class TestKkt:
    def test_optimum(self):
        residual = kkt_residual(
            np.array([[1.0]]), np.array([2.0]), 1, 0.5, np.array([1.5])
        )
        assert residual == pytest.approx(0.0)

    def test_positive_entry_off_its_optimum(self):
        residual = kkt_residual(
            np.array([[1.0]]), np.array([2.0]), 1, 0.5, np.array([1.0])
        )
        assert residual == pytest.approx(0.5)

    def test_zero_entry_with_ascending_gradient(self):
        residual = kkt_residual(
            np.array([[1.0]]), np.array([-1.0]), 1, 0.5, np.array([0.0])
        )
        assert residual == 0.0

    def test_zero_entry_that_should_enter(self):
        residual = kkt_residual(
            np.array([[1.0]]), np.array([2.0]), 1, 0.5, np.array([0.0])
        )
        assert residual == pytest.approx(1.5)


class TestRandomInstances:
    @pytest.mark.parametrize("seed", range(50))
    def test_matches_projected_gradient(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(20, 10))
        d = rng.normal(size=20)
        sigma = 1.0
        alpha = rng.uniform(0.1, 2.0)
        solution = solve_nn_lasso(A, d, sigma, alpha, tol=1e-10)
        reference = projected_gradient(A, d, sigma, alpha, tol=1e-12)
        assert np.abs(solution.lam - reference.lam).max() <= 1e-8
        assert solution.kkt_residual <= 1e-10
        assert kkt_residual(A, d, sigma, alpha, solution.lam) <= 1e-10

    def test_never_worse_than_zero(self, rng):
        A = rng.normal(size=(30, 15))
        d = rng.normal(size=30)
        solution = solve_nn_lasso(A, d, 0.3, 0.5)
        assert solution.objective_value <= objective(
            A, d, 0.3, 0.5, np.zeros(15)
        )
        assert (solution.lam >= 0).all()

    def test_scaling_invariance(self, rng):
        A = rng.normal(size=(20, 8))
        d = rng.normal(size=20)
        base = solve_nn_lasso(A, d, 1.0, 0.7, tol=1e-12)
        scaled = solve_nn_lasso(A, 3.0 * d, 3.0, 0.7 / 3.0, tol=1e-12)
        assert np.allclose(scaled.lam, 3.0 * base.lam, atol=1e-8)

    @pytest.mark.parametrize("factor", [0.2, 3.0])
    def test_noise_level_and_weight_trade_off(self, rng, factor):
        A = rng.normal(size=(20, 8))
        d = rng.normal(size=20)
        base = solve_nn_lasso(A, d, 0.5, 0.7, tol=1e-12)
        traded = solve_nn_lasso(
            A, d, 0.5 * factor, 0.7 / factor**2, tol=1e-12 / factor**2
        )
        assert np.allclose(traded.lam, base.lam, rtol=0, atol=1e-8)
        assert traded.objective_value == pytest.approx(
            base.objective_value / factor**2, rel=1e-10
        )

    def test_warm_start(self, rng):
        A = rng.normal(size=(20, 10))
        d = rng.normal(size=20)
        cold = solve_nn_lasso(A, d, 1.0, 0.5, tol=1e-12)
        warm = solve_nn_lasso(A, d, 1.0, 0.5, tol=1e-12, x0=cold.lam)
        assert warm.iterations == 0
        assert np.array_equal(warm.lam, cold.lam)

    def test_iteration_limit(self, rng):
        A = rng.normal(size=(20, 10))
        d = rng.normal(size=20)
        with pytest.raises(ConvergenceError) as info:
            projected_gradient(A, d, 1.0, 0.1, tol=1e-14, max_iter=1)
        assert info.value.residual > 0

    @pytest.mark.parametrize(
        "sigma, alpha", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5)]
    )
    def test_rejects_invalid(self, sigma, alpha):
        with pytest.raises(ValueError):
            solve_nn_lasso(np.eye(2), np.ones(2), sigma, alpha)

    def test_rejects_mismatched_data(self):
        with pytest.raises(ValueError, match="rows"):
            solve_nn_lasso(np.eye(2), np.ones(3), 1.0, 1.0)


class TestDesignMatrix:
    def test_empty(self, stack):
        design = build_design_matrix([], stack)
        assert design.A.shape == (stack.obs.n_observations, 0)

    def test_causality(self, stack, small_sensors):
        step = 6
        design = build_design_matrix([(step, 70)], stack)
        times = small_sensors.observation_table()["t"].to_numpy()
        early = times < stack.grid.times[step] - small_sensors.rho_t
        assert early.any()
        assert not design.A[early, 0].any()
        assert design.A[:, 0].any()

    def test_superposition(self, stack, rng):
        keys = [(0, 70), (3, 70), (2, 45), (5, 100)]
        lam = rng.uniform(0.5, 2.0, size=len(keys))
        design = build_design_matrix(keys, stack)
        atoms = SourceAtomSet.at_nodes(stack.ops.mesh, keys, lam)
        source = atoms_to_source(atoms, stack.projector, stack.grid)
        field = solve_forward(stack.ops, source, stack.grid)
        readings = stack.obs.apply(field)
        assert np.allclose(
            design.A @ lam, readings, atol=1e-12 * np.abs(readings).max()
        )

    def test_impulse_responses_are_shared_across_steps(self, stack):
        build_design_matrix([(1, 30), (4, 30), (7, 30)], stack)
        cached = len(stack.responses)
        build_design_matrix([(2, 30)], stack)
        assert len(stack.responses) == cached

    def test_extend_and_select(self, stack):
        first = build_design_matrix([(0, 10)], stack)
        second = build_design_matrix([(1, 11), (2, 12)], stack)
        joined = first.extended(second)
        assert joined.keys == ((0, 10), (1, 11), (2, 12))
        kept = joined.select(np.array([True, False, True]))
        assert kept.keys == ((0, 10), (2, 12))
        assert np.array_equal(kept.A[:, 1], second.A[:, 1])

    def test_key_count_mismatch(self):
        with pytest.raises(ValueError):
            DesignMatrix(np.zeros((3, 2)), ((0, 0),))

    def test_step_outside_the_grid(self, stack):
        with pytest.raises(ValueError, match="outside"):
            build_design_matrix([(stack.grid.n_steps + 1, 0)], stack)

    def test_threaded_build_matches(self, small_ops, short_grid, stack):
        threaded = InversionStack.build(
            small_ops, short_grid, stack.obs, stack.shape, threads=3
        )
        keys = [(n, 20 + n) for n in range(8)]
        assert np.allclose(
            build_design_matrix(keys, threaded).A,
            build_design_matrix(keys, stack).A,
            rtol=0,
            atol=1e-14,
        )
