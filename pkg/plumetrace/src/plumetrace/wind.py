from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Sequence, Tuple, Type, Union

import numpy as np
import pandas as pd

from plumetrace.mesh import Mesh, interpolate


class WindField(ABC):
    """Velocity field in m/s, evaluable anywhere in the closed domain."""

    @abstractmethod
    def at(self, points: np.ndarray) -> np.ndarray:
        """Returns velocities of shape (n_points, 2)."""
        pass

    def __add__(self, other: "WindField") -> "CompositeWind":
        return CompositeWind([self, other])


# Uniform


class UniformWind(WindField):
    def __init__(self, vx: float = 0.0, vy: float = 0.0) -> None:
        self.velocity = np.array([vx, vy], dtype=float)

    def at(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.broadcast_to(self.velocity, points.shape).copy()


# Vortex


class VortexWind(WindField):
    """Lamb-Oseen vortex: rigid rotation inside the core, decaying outside.

    ``strength`` is the circulation in m^2/s, counter-clockwise when
    positive.
    """

    def __init__(
        self,
        center: Tuple[float, float] = (0.5, 0.5),
        strength: float = 0.1,
        core_radius: float = 0.25,
    ) -> None:
        if core_radius <= 0:
            raise ValueError("Vortex core radius must be positive.")
        self.center = np.asarray(center, dtype=float)
        self.strength = float(strength)
        self.core_radius = float(core_radius)

    def at(self, points: np.ndarray) -> np.ndarray:
        offset = np.atleast_2d(points) - self.center
        r2 = np.einsum("ij,ij->i", offset, offset)
        rc2 = self.core_radius**2
        safe = np.where(r2 > 1e-12 * rc2, r2, 1.0)
        factor = np.where(
            r2 > 1e-12 * rc2,
            -np.expm1(-r2 / rc2) / safe,
            1.0 / rc2,
        )
        factor *= self.strength / (2 * np.pi)
        return factor[:, None] * np.column_stack([-offset[:, 1], offset[:, 0]])


# Shear


class ShearWind(WindField):
    """Horizontal wind growing linearly with height: v = (rate (y - y0), 0)."""

    def __init__(self, rate: float = 1.0, y0: float = 0.0) -> None:
        self.rate = float(rate)
        self.y0 = float(y0)

    def at(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.column_stack(
            [self.rate * (points[:, 1] - self.y0), np.zeros(len(points))]
        )


# Nodal


class NodalWind(WindField):
    """Per-node velocities with barycentric interpolation in between."""

    def __init__(self, mesh: Mesh, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_nodes, 2):
            raise ValueError(
                f"Nodal wind needs shape ({mesh.n_nodes}, 2), "
                f"got {values.shape}."
            )
        if not np.isfinite(values).all():
            raise ValueError("Nodal wind values must be finite.")
        self.mesh = mesh
        self.values = values

    def at(self, points: np.ndarray) -> np.ndarray:
        return interpolate(self.mesh, self.values, np.atleast_2d(points))

    @classmethod
    def from_csv(cls, mesh: Mesh, path: Union[str, Path]) -> "NodalWind":
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = {"node_id", "vx", "vy"} - set(frame.columns)
        if missing:
            raise ValueError(f"Wind file lacks columns {sorted(missing)}.")
        ids = frame["node_id"].to_numpy(dtype=int)
        if sorted(ids.tolist()) != list(range(mesh.n_nodes)):
            raise ValueError("Wind file must list every mesh node once.")
        values = np.empty((mesh.n_nodes, 2))
        values[ids] = frame[["vx", "vy"]].to_numpy(dtype=float)
        return cls(mesh, values)


# Composite


class CompositeWind(WindField):
    def __init__(self, components: Sequence[WindField]) -> None:
        if not components:
            raise ValueError("Composite wind needs at least one component.")
        self.components = list(components)

    def at(self, points: np.ndarray) -> np.ndarray:
        return sum(component.at(points) for component in self.components)


# Lookup

WIND_TYPES: Dict[str, Type[WindField]] = {
    "uniform": UniformWind,
    "vortex": VortexWind,
    "shear": ShearWind,
}


def wind_type(name: str) -> Type[WindField]:
    """Analytic wind class for a config ``type`` entry."""
    try:
        return WIND_TYPES[name]
    except KeyError:
        raise ValueError(
            f"Unknown wind type '{name}', expected one of "
            f"{sorted(WIND_TYPES)}."
        ) from None
