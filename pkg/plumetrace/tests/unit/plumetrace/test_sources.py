import numpy as np
import pytest

from plumetrace.fem import mass_matrix
from plumetrace.mesh import generate_rect_mesh
from plumetrace.sources import (
    ParameterCurve,
    ShapeParams,
    ShapeProjector,
    SourceAtomSet,
    SourceField,
    assemble_W,
    atoms_to_source,
    project_function,
    project_shape,
    sample_curve,
    shape_omega,
)
from plumetrace.transport import TimeGrid


@pytest.fixture(scope="module")
def mesh():
    return generate_rect_mesh(1, 1, 16, 16)


@pytest.fixture(scope="module")
def M(mesh):
    return mass_matrix(mesh)


@pytest.fixture(scope="module")
def shape() -> ShapeParams:
    return ShapeParams(r=0.1, eps=1e-3)


class TestShapeOmega:
    def test_capped_at_the_centre(self, shape):
        assert shape_omega(np.zeros(2), np.zeros(2), shape) == 0.5

    def test_threshold_at_the_radius(self, shape):
        value = shape_omega(np.zeros(2), np.array([0.1, 0.0]), shape)
        assert value == pytest.approx(1e-3)

    def test_decay(self, shape):
        value = shape_omega(np.zeros(2), np.array([0.2, 0.0]), shape)
        assert value == pytest.approx(1e-12)

    def test_radial_symmetry(self, shape, rng):
        angles = rng.uniform(0, 2 * np.pi, size=10)
        points = 0.07 * np.column_stack([np.cos(angles), np.sin(angles)])
        values = shape_omega(np.zeros(2), points, shape)
        assert np.allclose(values, values[0], rtol=1e-12)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"r": 0.0, "eps": 0.1},
            {"r": 0.1, "eps": 1.0},
            {"r": 0.1, "eps": 0.1, "cap": 1.5},
            {"r": 0.1, "eps": 0.1, "trunc_tol": 0.0},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ShapeParams(**kwargs)

    def test_support_radius(self, shape):
        radius = shape.support_radius
        value = shape_omega(np.zeros(2), np.array([radius, 0.0]), shape)
        assert value == pytest.approx(shape.trunc_tol)


class TestProjection:
    def test_constant_projects_to_constant(self, mesh, M):
        projected = project_function(
            mesh, M, lambda p: np.ones(len(p))
        )
        assert np.allclose(projected, 1.0, atol=1e-12)

    def test_integral_of_uncapped_shape(self):
        mesh = generate_rect_mesh(1, 1, 64, 64)
        M = mass_matrix(mesh)
        p = ShapeParams(r=0.25, eps=1e-3, cap=1.0)
        projected = project_shape(mesh, M, np.array([0.5, 0.5]), p)
        integral = np.ones(mesh.n_nodes) @ (M @ projected)
        expected = np.pi * p.r**2 / -np.log(p.eps)
        assert integral == pytest.approx(expected, rel=1e-4)

    def test_linearity_in_intensity(self, mesh, M, shape):
        curve = ParameterCurve.static((0.5, 0.5), 1.0, (0.0, 0.1))
        double = ParameterCurve.static((0.5, 0.5), 2.0, (0.0, 0.1))
        grid = TimeGrid(0.05, 2)
        single = sample_curve(curve, grid, shape, mesh, M).values
        twice = sample_curve(double, grid, shape, mesh, M).values
        assert np.allclose(twice, 2 * single)

    def test_centre_outside_the_mesh(self, mesh, M, shape):
        with pytest.raises(ValueError, match="outside"):
            project_shape(mesh, M, np.array([1.5, 0.5]), shape)

    def test_node_loads_are_cached(self, mesh, M, shape):
        projector = ShapeProjector(mesh, M, shape)
        assert projector.node_load(5) is projector.node_load(5)


class TestParameterCurve:
    @pytest.fixture
    def curve(self):
        return ParameterCurve(
            times=np.array([0.0, 1.0]),
            intensities=np.array([1.0, 3.0]),
            locations=np.array([[0.2, 0.2], [0.6, 0.4]]),
            window=(0.25, 0.75),
        )

    def test_interpolates_inside_the_window(self, curve):
        assert curve.intensity(0.5) == pytest.approx(2.0)
        assert np.allclose(curve.location(0.5), [0.4, 0.3])

    def test_zero_outside_the_window(self, curve):
        assert np.array_equal(curve.intensity([0.0, 0.2, 0.8, 1.0]), [0] * 4)

    @pytest.mark.parametrize(
        "times, intensities, window",
        [
            ([1.0, 0.0], [1.0, 1.0], (0.0, 1.0)),
            ([0.0, 1.0], [1.0, -1.0], (0.0, 1.0)),
            ([0.0, 1.0], [1.0, 1.0], (1.0, 0.0)),
        ],
    )
    def test_rejects_invalid(self, times, intensities, window):
        with pytest.raises(ValueError):
            ParameterCurve(
                np.array(times),
                np.array(intensities),
                np.zeros((2, 2)),
                window,
            )


class TestSampleCurve:
    def test_window_and_static_location(self, mesh, M, shape):
        grid = TimeGrid(0.1, 10)
        curve = ParameterCurve.static((0.5, 0.5), 1.5, (0.2, 0.5))
        source = sample_curve(curve, grid, shape, mesh, M)
        active = np.flatnonzero(np.abs(source.values).sum(axis=1) > 0)
        assert active.tolist() == [2, 3, 4, 5]
        assert np.array_equal(source.values[2], source.values[5])

    def test_curve_leaving_the_domain(self, mesh, M, shape):
        curve = ParameterCurve(
            times=np.array([0.0, 1.0]),
            intensities=np.ones(2),
            locations=np.array([[0.5, 0.5], [1.5, 0.5]]),
            window=(0.0, 1.0),
        )
        with pytest.raises(ValueError, match="leaves the domain"):
            sample_curve(curve, TimeGrid(0.1, 10), shape, mesh, M)


class TestAtoms:
    @pytest.fixture
    def projector(self, mesh, M, shape):
        return ShapeProjector(mesh, M, shape)

    def test_empty_atom_set(self, projector):
        grid = TimeGrid(0.1, 4)
        source = atoms_to_source(SourceAtomSet.empty(), projector, grid)
        assert not source.values.any()

    def test_single_atom(self, mesh, projector):
        grid = TimeGrid(0.1, 4)
        node = 8 * 17 + 8
        atoms = SourceAtomSet.at_nodes(mesh, [(2, node)], np.array([0.7]))
        source = atoms_to_source(atoms, projector, grid)
        expected = 0.7 * projector.project_node(node)
        assert np.allclose(source.values[2], expected)
        assert not np.delete(source.values, 2, axis=0).any()

    def test_coincident_atoms_add_up(self, mesh, projector):
        grid = TimeGrid(0.1, 4)
        twice = SourceAtomSet.at_nodes(
            mesh, [(1, 40), (1, 40)], np.array([0.5, 0.25])
        )
        once = SourceAtomSet.at_nodes(mesh, [(1, 40)], np.array([0.75]))
        assert np.allclose(
            atoms_to_source(twice, projector, grid).values,
            atoms_to_source(once, projector, grid).values,
        )

    def test_steps_outside_the_grid(self, mesh, projector):
        atoms = SourceAtomSet.at_nodes(mesh, [(7, 0)])
        with pytest.raises(ValueError, match="time grid"):
            atoms_to_source(atoms, projector, TimeGrid(0.1, 4))

    def test_rejects_negative_intensities(self, mesh):
        with pytest.raises(ValueError):
            SourceAtomSet.at_nodes(mesh, [(0, 0)], np.array([-1.0]))

    def test_trajectory(self, mesh):
        atoms = SourceAtomSet(
            steps=[1, 1, 3],
            nodes=[0, 1, 2],
            positions=[[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]],
            intensities=[1.0, 3.0, 2.0],
        )
        trajectory = atoms.trajectory(0.1)
        assert trajectory["step"].tolist() == [1, 3]
        assert trajectory["t"].tolist() == pytest.approx([0.1, 0.3])
        assert trajectory["x"].tolist() == pytest.approx([0.75, 0.5])
        assert trajectory["intensity"].tolist() == [4.0, 2.0]

    def test_empty_trajectory(self):
        assert SourceAtomSet.empty().trajectory(0.1).empty


class TestDualOperator:
    def test_columns_are_local(self, mesh, M, shape):
        W = assemble_W(mesh, M, shape)
        entries = W.tocoo()
        distance = np.linalg.norm(
            mesh.nodes[entries.row] - mesh.nodes[entries.col], axis=1
        )
        reach = shape.support_radius + mesh.diameters.max()
        assert (distance <= reach + 1e-12).all()

    def test_columns_are_shape_loads(self, mesh, M, shape):
        W = assemble_W(mesh, M, shape, threads=2)
        projector = ShapeProjector(mesh, M, shape)
        column = W[:, 100].toarray().ravel()
        assert np.allclose(column, projector.load(mesh.nodes[100]))

    def test_zero_adjoint_gives_zero_dual(self, mesh, M, shape):
        W = assemble_W(mesh, M, shape)
        assert not (W.T @ np.zeros(mesh.n_nodes)).any()


class TestSourceField:
    def test_level_count(self):
        with pytest.raises(ValueError, match="time levels"):
            SourceField(np.zeros((3, 4)), TimeGrid(0.1, 3))
