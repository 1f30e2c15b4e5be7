import numpy as np
import pytest

from plumetrace.mesh import (
    BoundaryTag,
    classify_boundary,
    generate_rect_mesh,
    interpolate,
    load_mesh,
    locate,
    save_mesh,
)
from plumetrace.wind import UniformWind


def shoelace(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def edge_set(mesh, tag):
    return {tuple(sorted(e)) for e in mesh.edges_with_tag(tag).tolist()}


class TestGenerateRectMesh:
    def test_minimal_square(self):
        mesh = generate_rect_mesh(1, 1, 1, 1)
        assert mesh.n_nodes == 4
        assert mesh.n_triangles == 2

    def test_counts(self):
        mesh = generate_rect_mesh(2, 1, 8, 4)
        assert mesh.n_nodes == 45
        assert mesh.n_triangles == 64
        assert len(mesh.boundary_edges) == 24

    def test_areas_partition_the_square(self):
        mesh = generate_rect_mesh(1, 1, 4, 4)
        assert mesh.area == pytest.approx(1.0, abs=1e-15)
        assert (mesh.areas > 0).all()

    def test_area_matches_boundary_polygon(self):
        mesh = generate_rect_mesh(3, 2, 7, 5)
        corners = np.array([[0, 0], [3, 0], [3, 2], [0, 2]], dtype=float)
        assert mesh.area == pytest.approx(shoelace(corners), rel=1e-12)

    def test_boundary_edges_are_oriented_outward(self):
        mesh = generate_rect_mesh(1, 1, 3, 3)
        outward = mesh.boundary_midpoints + 1e-3 * mesh.boundary_normals
        inside = (outward >= 0).all(axis=1) & (outward <= 1).all(axis=1)
        assert not inside.any()

    @pytest.mark.parametrize(
        "args",
        [(0, 1, 1, 1), (1, -1, 1, 1), (1, 1, 0, 1), (1, 1, 1, 0)],
    )
    def test_rejects_invalid_input(self, args):
        with pytest.raises(ValueError):
            generate_rect_mesh(*args)


class TestLoadMesh:
    def test_round_trip(self, tmp_path):
        mesh = generate_rect_mesh(2, 1, 3, 2)
        first = tmp_path / "first.mesh"
        second = tmp_path / "second.mesh"
        save_mesh(mesh, first)
        loaded = load_mesh(first)
        save_mesh(loaded, second)
        assert first.read_text() == second.read_text()
        assert np.array_equal(loaded.nodes, mesh.nodes)
        assert np.array_equal(loaded.triangles, mesh.triangles)

    def test_fixes_clockwise_triangles(self, resources_dir):
        mesh = load_mesh(resources_dir / "clockwise.mesh")
        assert (mesh.areas > 0).all()
        assert mesh.area == pytest.approx(1.0)
        reference = generate_rect_mesh(1, 1, 1, 1)
        assert sorted(map(tuple, mesh.nodes.tolist())) == sorted(
            map(tuple, reference.nodes.tolist())
        )

    def test_rejects_dangling_index(self, resources_dir):
        with pytest.raises(ValueError, match="outside"):
            load_mesh(resources_dir / "dangling.mesh")

    def test_rejects_degenerate_triangle(self, resources_dir):
        with pytest.raises(ValueError, match="degenerate"):
            load_mesh(resources_dir / "degenerate.mesh")

    def test_rejects_missing_header(self, tmp_path):
        path = tmp_path / "broken.mesh"
        path.write_text("nodes 0\n")
        with pytest.raises(ValueError, match="header"):
            load_mesh(path)

    def test_reports_line_of_parse_error(self, tmp_path):
        path = tmp_path / "broken.mesh"
        path.write_text("plumetrace-mesh v1\nnodes 1\n0.0 zero\n")
        with pytest.raises(ValueError, match="Line 3"):
            load_mesh(path)


class TestClassifyBoundary:
    @pytest.fixture
    def mesh(self):
        return generate_rect_mesh(1, 1, 4, 4)

    def edges_on(self, mesh, axis, value):
        midpoints = mesh.boundary_midpoints
        mask = np.isclose(midpoints[:, axis], value)
        return {tuple(sorted(e)) for e in mesh.boundary_edges[mask].tolist()}

    def test_uniform_wind_to_the_right(self, mesh):
        tagged = classify_boundary(mesh, UniformWind(1, 0))
        assert edge_set(tagged, BoundaryTag.INFLOW) == self.edges_on(
            mesh, 0, 0.0
        )
        assert edge_set(tagged, BoundaryTag.OUTFLOW) == self.edges_on(
            mesh, 0, 1.0
        )
        assert edge_set(
            tagged, BoundaryTag.CHARACTERISTIC
        ) == self.edges_on(mesh, 1, 0.0) | self.edges_on(mesh, 1, 1.0)

    def test_downward_wind(self, mesh):
        tagged = classify_boundary(mesh, UniformWind(0, -1))
        assert edge_set(tagged, BoundaryTag.INFLOW) == self.edges_on(
            mesh, 1, 1.0
        )
        assert edge_set(tagged, BoundaryTag.OUTFLOW) == self.edges_on(
            mesh, 1, 0.0
        )

    def test_zero_wind_is_characteristic(self, mesh):
        tagged = classify_boundary(mesh, UniformWind(0, 0))
        counts = tagged.tag_counts()
        assert counts[BoundaryTag.CHARACTERISTIC] == 16
        assert counts[BoundaryTag.INFLOW] == counts[BoundaryTag.OUTFLOW] == 0

    def test_tags_partition_the_boundary(self, mesh, swirl):
        tagged = classify_boundary(mesh, swirl)
        assert sum(tagged.tag_counts().values()) == len(mesh.boundary_edges)

    def test_idempotent(self, mesh, swirl):
        once = classify_boundary(mesh, swirl)
        twice = classify_boundary(once, swirl)
        assert once.boundary_tags == twice.boundary_tags

    def test_unclassified_mesh_has_no_tags(self, mesh):
        with pytest.raises(ValueError):
            mesh.edges_with_tag(BoundaryTag.INFLOW)


class TestLocate:
    def test_outside_points(self):
        mesh = generate_rect_mesh(1, 1, 2, 2)
        triangles, _ = locate(mesh, np.array([[1.5, 0.5], [0.5, 0.5]]))
        assert triangles[0] == -1
        assert triangles[1] >= 0

    def test_interpolation_reproduces_linear_fields(self, rng):
        mesh = generate_rect_mesh(1, 1, 5, 5)
        values = 2 * mesh.nodes[:, 0] - mesh.nodes[:, 1] + 0.5
        points = rng.uniform(0, 1, size=(20, 2))
        expected = 2 * points[:, 0] - points[:, 1] + 0.5
        assert np.allclose(interpolate(mesh, values, points), expected)

    def test_interpolation_outside_fails(self):
        mesh = generate_rect_mesh(1, 1, 2, 2)
        with pytest.raises(ValueError, match="outside"):
            interpolate(mesh, np.zeros(mesh.n_nodes), np.array([[2.0, 2.0]]))
