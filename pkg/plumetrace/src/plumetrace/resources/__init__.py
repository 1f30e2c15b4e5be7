from importlib.resources import files, path
from pathlib import Path, PurePath
from typing import ContextManager, List, Tuple, Union

SCENARIO_SUFFIX = ".yaml"


def split_resource_path(
    resource_path: Union[str, PurePath]
) -> Tuple[str, str]:
    """Splits a resource path into dotted subpackage and file name."""
    resource_path = PurePath(resource_path)
    if resource_path.is_absolute() or ".." in resource_path.parts:
        raise ValueError(
            f"Resource path must stay inside the package: '{resource_path}'"
        )
    return ".".join(resource_path.parent.parts), resource_path.name


def resource(resource_path: Union[str, PurePath]) -> ContextManager[Path]:
    package_part, resource_name = split_resource_path(resource_path)
    package = f"{__name__}{'.' + package_part if package_part else ''}"
    return path(package, resource_name)


def resource_text(resource_path: Union[str, PurePath]) -> str:
    with resource(resource_path) as r:
        return r.read_text(encoding="utf-8")


def scenario_names() -> List[str]:
    """Names of the shipped scenarios, usable as ``builtin:<name>``."""
    directory = files(__name__).joinpath("scenarios")
    return sorted(
        entry.name[: -len(SCENARIO_SUFFIX)]
        for entry in directory.iterdir()
        if entry.name.endswith(SCENARIO_SUFFIX)
    )
