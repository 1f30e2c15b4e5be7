import json
import logging
import math
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Dict, List, Mapping, Union

import meshio
import numpy as np
import pandas as pd

from plumetrace.mesh import Mesh

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def package_version() -> str:
    try:
        return version("plumetrace")
    except PackageNotFoundError:
        return "unknown"


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_json(path: Union[str, Path], data: Mapping[str, Any]) -> None:
    text = json.dumps(_jsonable(dict(data)), indent=2, sort_keys=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_table(path: Union[str, Path], frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def write_vtk(
    path: Union[str, Path], mesh: Mesh, point_data: Dict[str, np.ndarray]
) -> None:
    """Legacy ASCII VTK unstructured grid with nodal scalars."""
    points = np.column_stack([mesh.nodes, np.zeros(mesh.n_nodes)])
    grid = meshio.Mesh(
        points=points,
        cells=[("triangle", mesh.triangles)],
        point_data={name: np.asarray(v) for name, v in point_data.items()},
    )
    meshio.write(str(path), grid, file_format="vtk", binary=False)


def write_field_series(
    directory: Union[str, Path],
    prefix: str,
    mesh: Mesh,
    values: np.ndarray,
    name: str,
    every: int = 1,
) -> List[Path]:
    """One file per exported time level, named ``<prefix>_<level>.vtk``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = len(str(len(values) - 1))
    paths = []
    for level in range(0, len(values), every):
        path = directory / f"{prefix}_{level:0{width}d}.vtk"
        write_vtk(path, mesh, {name: values[level]})
        paths.append(path)
    logger.debug(f"Wrote {len(paths)} '{name}' snapshots to {directory}.")
    return paths


def write_manifest(
    directory: Union[str, Path],
    command: str,
    config: Dict[str, Any],
    outputs: List[Path],
    **extra: Any,
) -> Path:
    directory = Path(directory)
    path = directory / "manifest.json"
    write_json(
        path,
        {
            "command": command,
            "version": package_version(),
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "config": config,
            "outputs": sorted(
                str(Path(p).relative_to(directory)) for p in outputs
            ),
            **extra,
        },
    )
    return path
