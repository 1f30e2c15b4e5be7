"""Triangular meshes of the computational domain.

Meshes are immutable. Boundary edges are stored oriented so that the
owning triangle lies to their left, which makes the outward normal of an
edge ``(a, b)`` the right-hand normal of ``b - a``.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

if TYPE_CHECKING:
    from plumetrace.wind import WindField

logger = logging.getLogger(__name__)

MESH_HEADER = "plumetrace-mesh v1"


class BoundaryTag(str, Enum):
    INFLOW = "inflow"
    OUTFLOW = "outflow"
    CHARACTERISTIC = "characteristic"


@dataclass(frozen=True, eq=False)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: Optional[Tuple[BoundaryTag, ...]] = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def is_classified(self) -> bool:
        return self.boundary_tags is not None

    @cached_property
    def vertices(self) -> np.ndarray:
        """Triangle vertex coordinates, shape (n_triangles, 3, 2)."""
        return self.nodes[self.triangles]

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * _signed_double_areas(self.vertices)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def diameters(self) -> np.ndarray:
        v = self.vertices
        edges = np.stack(
            [v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1
        )
        return np.linalg.norm(edges, axis=2).max(axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices.mean(axis=1)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Constant gradients of the P1 basis, shape (n_triangles, 3, 2)."""
        v = self.vertices
        double_area = _signed_double_areas(v)
        grads = np.empty_like(v)
        for local in range(3):
            j, k = (local + 1) % 3, (local + 2) % 3
            grads[:, local, 0] = v[:, j, 1] - v[:, k, 1]
            grads[:, local, 1] = v[:, k, 0] - v[:, j, 0]
        return grads / double_area[:, None, None]

    @cached_property
    def boundary_midpoints(self) -> np.ndarray:
        return self.nodes[self.boundary_edges].mean(axis=1)

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        """Outward unit normals of the boundary edges."""
        tangent = (
            self.nodes[self.boundary_edges[:, 1]]
            - self.nodes[self.boundary_edges[:, 0]]
        )
        normals = np.column_stack([tangent[:, 1], -tangent[:, 0]])
        return normals / np.linalg.norm(normals, axis=1)[:, None]

    @cached_property
    def boundary_lengths(self) -> np.ndarray:
        tangent = (
            self.nodes[self.boundary_edges[:, 1]]
            - self.nodes[self.boundary_edges[:, 0]]
        )
        return np.linalg.norm(tangent, axis=1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def edges_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        if self.boundary_tags is None:
            raise ValueError("Mesh boundary is not classified.")
        mask = np.array([t == tag for t in self.boundary_tags], dtype=bool)
        return self.boundary_edges[mask]

    def nodes_with_tag(self, tag: BoundaryTag) -> np.ndarray:
        return np.unique(self.edges_with_tag(tag))

    def tag_counts(self) -> Dict[BoundaryTag, int]:
        if self.boundary_tags is None:
            raise ValueError("Mesh boundary is not classified.")
        return {
            tag: sum(1 for t in self.boundary_tags if t == tag)
            for tag in BoundaryTag
        }

    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    def triangles_near(self, point: np.ndarray, radius: float) -> np.ndarray:
        """Indices of triangles that may intersect the disc around point."""
        reach = radius + float(self.diameters.max())
        return np.asarray(
            sorted(self._centroid_tree.query_ball_point(point, reach)),
            dtype=int,
        )


def _signed_double_areas(vertices: np.ndarray) -> np.ndarray:
    a = vertices[:, 1] - vertices[:, 0]
    b = vertices[:, 2] - vertices[:, 0]
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


def _oriented_boundary(triangles: np.ndarray) -> np.ndarray:
    """Edges owned by exactly one triangle, oriented counter-clockwise."""
    half_edges = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    keys = np.sort(half_edges, axis=1)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    if counts.max() > 2:
        raise ValueError("Mesh has edges shared by more than two triangles.")
    return half_edges[counts[inverse] == 1]


def build_mesh(
    nodes: np.ndarray,
    triangles: np.ndarray,
    boundary_edges: Optional[np.ndarray] = None,
) -> Mesh:
    """Validates raw arrays and builds a consistently oriented mesh.

    Clockwise triangles are reordered. When ``boundary_edges`` is given it
    must list exactly the edges owned by a single triangle, in any order
    and orientation; the listing order is kept.
    """
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 2)
    triangles = np.array(triangles, dtype=int).reshape(-1, 3)
    if len(nodes) == 0 or len(triangles) == 0:
        raise ValueError("Mesh needs at least one node and one triangle.")
    if not np.isfinite(nodes).all():
        raise ValueError("Mesh node coordinates must be finite.")
    if triangles.min() < 0 or triangles.max() >= len(nodes):
        raise ValueError(
            f"Triangle references a node index outside [0, {len(nodes)})."
        )

    double_areas = _signed_double_areas(nodes[triangles])
    scale = float(np.ptp(nodes, axis=0).max()) ** 2
    degenerate = np.flatnonzero(np.abs(double_areas) <= 1e-14 * scale)
    if len(degenerate) > 0:
        raise ValueError(f"Triangle {degenerate[0]} is degenerate.")
    clockwise = double_areas < 0
    if clockwise.any():
        logger.debug(f"Reorienting {clockwise.sum()} clockwise triangles.")
        triangles[clockwise] = triangles[clockwise][:, [0, 2, 1]]

    oriented = _oriented_boundary(triangles)
    if boundary_edges is None:
        boundary = oriented
    else:
        boundary = np.asarray(boundary_edges, dtype=int).reshape(-1, 2)
        lookup = {tuple(sorted(e)): tuple(e) for e in oriented.tolist()}
        listed = [tuple(sorted(e)) for e in boundary.tolist()]
        if len(set(listed)) != len(listed):
            raise ValueError("Boundary listing contains duplicate edges.")
        unknown = [e for e in listed if e not in lookup]
        if unknown:
            raise ValueError(f"Edge {unknown[0]} is not a boundary edge.")
        if len(listed) != len(lookup):
            raise ValueError(
                f"Boundary listing has {len(listed)} edges, "
                f"but the triangulation has {len(lookup)}."
            )
        boundary = np.array([lookup[e] for e in listed], dtype=int)

    return Mesh(nodes=nodes, triangles=triangles, boundary_edges=boundary)


def generate_rect_mesh(width: float, height: float, nx: int, ny: int) -> Mesh:
    """Structured triangulation of [0, width] x [0, height]."""
    if width <= 0 or height <= 0:
        raise ValueError("Rectangle dimensions must be positive.")
    if nx < 1 or ny < 1:
        raise ValueError("Rectangle needs at least one subdivision per axis.")

    xs = np.arange(nx + 1) * (width / nx)
    ys = np.arange(ny + 1) * (height / ny)
    xs[-1], ys[-1] = width, height
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    n00 = (j * (nx + 1) + i).ravel()
    n10, n01 = n00 + 1, n00 + nx + 1
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return build_mesh(nodes, triangles)


def _read_section(lines, position: int, name: str, width: int, cast):
    if position >= len(lines):
        raise ValueError(f"Missing '{name}' section.")
    number, line = lines[position]
    parts = line.split()
    if len(parts) != 2 or parts[0] != name:
        raise ValueError(f"Line {number}: expected '{name} <count>'.")
    try:
        count = int(parts[1])
    except ValueError:
        raise ValueError(f"Line {number}: invalid count '{parts[1]}'.")
    rows = []
    for number, line in lines[position + 1 : position + 1 + count]:
        parts = line.split()
        if len(parts) != width:
            raise ValueError(f"Line {number}: expected {width} values.")
        try:
            rows.append([cast(p) for p in parts])
        except ValueError:
            raise ValueError(f"Line {number}: cannot parse '{line}'.")
    if len(rows) != count:
        raise ValueError(f"Section '{name}' is truncated.")
    return rows, position + 1 + count


def load_mesh(path: Union[str, Path]) -> Mesh:
    text = Path(path).read_text(encoding="ascii")
    lines = [
        (number, line.strip())
        for number, line in enumerate(text.splitlines(), start=1)
        if line.strip()
    ]
    if not lines or lines[0][1] != MESH_HEADER:
        raise ValueError(f"Missing header '{MESH_HEADER}'.")
    nodes, position = _read_section(lines, 1, "nodes", 2, float)
    triangles, position = _read_section(lines, position, "triangles", 3, int)
    boundary, position = _read_section(lines, position, "boundary", 2, int)
    if position != len(lines):
        raise ValueError(f"Line {lines[position][0]}: unexpected content.")
    boundary = np.asarray(boundary, dtype=int).reshape(-1, 2)
    if len(boundary) > 0 and (
        boundary.min() < 0 or boundary.max() >= len(nodes)
    ):
        raise ValueError("Boundary edge references an unknown node.")
    mesh = build_mesh(np.array(nodes), np.array(triangles), boundary)
    logger.debug(
        f"Loaded mesh with {mesh.n_nodes} nodes, "
        f"{mesh.n_triangles} triangles."
    )
    return mesh


def save_mesh(mesh: Mesh, path: Union[str, Path]) -> None:
    lines = [MESH_HEADER, f"nodes {mesh.n_nodes}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append(f"boundary {len(mesh.boundary_edges)}")
    lines += [f"{i} {j}" for i, j in mesh.boundary_edges.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def classify_boundary(
    mesh: Mesh, wind: "WindField", tol_vn: Optional[float] = None
) -> Mesh:
    """Tags boundary edges by the sign of v.n at their midpoints."""
    vn = np.einsum(
        "ij,ij->i", wind.at(mesh.boundary_midpoints), mesh.boundary_normals
    )
    if tol_vn is None:
        speeds = np.linalg.norm(
            np.vstack([wind.at(mesh.nodes), wind.at(mesh.boundary_midpoints)]),
            axis=1,
        )
        tol_vn = 1e-12 * float(speeds.max())
    tags = tuple(
        BoundaryTag.INFLOW
        if value < -tol_vn
        else BoundaryTag.OUTFLOW
        if value > tol_vn
        else BoundaryTag.CHARACTERISTIC
        for value in vn.tolist()
    )
    return replace(mesh, boundary_tags=tags)


def locate(
    mesh: Mesh, points: np.ndarray, tol: float = 1e-10
) -> Tuple[np.ndarray, np.ndarray]:
    """Finds containing triangles and barycentric coordinates.

    Returns ``(triangle_index, barycentric)``; the index is -1 for points
    outside the mesh. Points on shared edges go to the lowest index.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    v = mesh.vertices
    reach = float(mesh.diameters.max())
    found = np.full(len(points), -1, dtype=int)
    bary = np.zeros((len(points), 3))
    for index, point in enumerate(points):
        candidates = np.asarray(
            sorted(mesh._centroid_tree.query_ball_point(point, reach)),
            dtype=int,
        )
        if len(candidates) == 0:
            continue
        origin = v[candidates, 0]
        basis = np.stack(
            [v[candidates, 1] - origin, v[candidates, 2] - origin], axis=2
        )
        local = np.linalg.solve(basis, (point - origin)[:, :, None])[..., 0]
        coords = np.column_stack([1 - local.sum(axis=1), local])
        inside = np.flatnonzero((coords >= -tol).all(axis=1))
        if len(inside) > 0:
            found[index] = candidates[inside[0]]
            bary[index] = np.clip(coords[inside[0]], 0.0, 1.0)
            bary[index] /= bary[index].sum()
    return found, bary


def interpolate(
    mesh: Mesh, values: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Evaluates a P1 nodal field at points inside the mesh."""
    triangles, bary = locate(mesh, points)
    if (triangles < 0).any():
        outside = np.atleast_2d(points)[np.argmax(triangles < 0)]
        raise ValueError(f"Point {tuple(outside)} lies outside the mesh.")
    nodal = np.asarray(values)[mesh.triangles[triangles]]
    if nodal.ndim == 2:
        return np.einsum("pk,pk->p", bary, nodal)
    return np.einsum("pk,pkd->pd", bary, nodal)
