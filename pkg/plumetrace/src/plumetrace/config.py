import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import yaml
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
from pydantic import BaseModel, Extra, root_validator, validator

from plumetrace.resources import resource_text, scenario_names

BUILTIN_PREFIX = "builtin:"


class BaseConfig(BaseModel):
    class Config:
        extra = Extra.forbid


class MeshParams(BaseConfig):
    file: Optional[Path] = None
    width: float = 1.0
    height: float = 1.0
    nx: int = 32
    ny: int = 32

    @validator("width", "height")
    def positive_extent(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive")
        return value

    @validator("nx", "ny")
    def positive_cells(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @property
    def spacing(self) -> float:
        return max(self.width / self.nx, self.height / self.ny)


class WindComponent(BaseConfig):
    type: str
    params: Dict[str, Any] = {}


class WindParams(BaseConfig):
    components: List[WindComponent] = []
    file: Optional[Path] = None
    divergence_tol: float = 1e-6

    @root_validator(skip_on_failure=True)
    def some_wind(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        if not values["components"] and values["file"] is None:
            raise ValueError("wind needs components or a file")
        return values


class TimeParams(BaseConfig):
    dt: float = 0.01
    t_obs: float = 1.0
    t_pred: Optional[float] = None

    @validator("dt", "t_obs")
    def positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive")
        return value

    @root_validator(skip_on_failure=True)
    def prediction_after_observation(
        cls, values: Dict[str, Any]
    ) -> Dict[str, Any]:
        t_pred = values["t_pred"]
        if t_pred is not None and t_pred < values["t_obs"]:
            raise ValueError("t_pred must not be shorter than t_obs")
        return values

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_obs / self.dt)))


class ShapeConfig(BaseConfig):
    r: float = 0.1
    eps: float = 0.001
    cap: float = 0.5
    trunc_tol: float = 1e-10


class Breakpoint(BaseConfig):
    t: float
    intensity: float
    x: float
    y: float

    @validator("intensity")
    def nonnegative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be nonnegative")
        return value


class TruthParams(BaseConfig):
    window: Tuple[float, float]
    breakpoints: List[Breakpoint]

    @validator("breakpoints")
    def sorted_breakpoints(cls, value: List[Breakpoint]) -> List[Breakpoint]:
        if not value:
            raise ValueError("needs at least one breakpoint")
        times = [b.t for b in value]
        if times != sorted(times):
            raise ValueError("breakpoints must be sorted in time")
        return value


class SensorGrid(BaseConfig):
    nx: int
    ny: int
    margin: float = 0.5


class Sampling(BaseConfig):
    start: float = 0.0
    stop: Optional[float] = None
    step: Optional[float] = None


class SensorParams(BaseConfig):
    grid: Optional[SensorGrid] = None
    positions: List[Tuple[float, float]] = []
    sampling: Sampling = Sampling()
    rho_x: Optional[float] = None
    rho_t: Optional[float] = None
    sigma_plateau: float = 0.5

    @root_validator(skip_on_failure=True)
    def one_layout(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        if (values["grid"] is None) == (not values["positions"]):
            raise ValueError("give exactly one of grid and positions")
        return values


class NoiseParams(BaseConfig):
    snr: float = math.inf
    seed: int = 0
    sigma: Optional[float] = None

    @validator("snr")
    def positive_snr(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive")
        return value


class PdapParams(BaseConfig):
    alpha: float = 0.01
    alpha_mode: str = "relative"
    insert_tol: Optional[float] = None
    prune_tol: Optional[float] = None
    max_iter: int = 100
    lasso_tol: Optional[float] = None


class InjectionParams(BaseConfig):
    center: Tuple[float, float]
    radius: float
    value: float = 1.0


class LineParams(BaseConfig):
    start: Tuple[float, float]
    direction: Tuple[float, float] = (1.0, 0.0)
    length: float
    n_points: int = 11


class CalibrationParams(BaseConfig):
    kappas: Optional[List[float]] = None
    source: float = 0.0
    injection: Optional[InjectionParams] = None
    line: Optional[LineParams] = None


class OutputParams(BaseConfig):
    directory: Path = Path("out")
    vtk: bool = True
    every: int = 1

    @validator("every")
    def positive_stride(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value


class Config(BaseConfig):
    name: str = "scenario"
    kappa: float = 1e-3
    mesh: MeshParams = MeshParams()
    wind: WindParams
    time: TimeParams = TimeParams()
    shape: ShapeConfig = ShapeConfig()
    truth: Optional[TruthParams] = None
    sensors: Optional[SensorParams] = None
    noise: NoiseParams = NoiseParams()
    pdap: PdapParams = PdapParams()
    calibration: CalibrationParams = CalibrationParams()
    output: OutputParams = OutputParams()
    base_dir: Path = Path(".")

    @validator("kappa")
    def positive_kappa(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive")
        return value

    def resolve(self, path: Optional[Path]) -> Optional[Path]:
        """Resolves scenario-relative paths against the scenario file."""
        if path is None or path.is_absolute():
            return path
        return self.base_dir / path

    def dump(self) -> Dict[str, Any]:
        data = self.dict()
        return _plain(data)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _load_source(source: str) -> Tuple[str, Path]:
    if source.startswith(BUILTIN_PREFIX):
        name = source[len(BUILTIN_PREFIX) :]
        if name not in scenario_names():
            raise ValueError(
                f"Unknown builtin scenario '{name}', "
                f"expected one of {scenario_names()}."
            )
        return resource_text(f"scenarios/{name}.yaml"), Path.cwd()
    path = Path(source)
    if not path.is_file():
        raise ValueError(f"Scenario file '{source}' does not exist.")
    return path.read_text(), path.resolve().parent


def get_config(
    source: Optional[str] = None, overrides: Optional[Iterable[str]] = None
) -> Config:
    """Merges defaults, a scenario file and dotlist entries, then validates.

    Malformed YAML or entries surface as ValueError, like validation errors.
    """
    try:
        return _get_config(source, overrides)
    except (yaml.YAMLError, OmegaConfBaseException) as e:
        raise ValueError(f"Invalid configuration: {e}") from e


def _get_config(
    source: Optional[str], overrides: Optional[Iterable[str]]
) -> Config:
    config = OmegaConf.create(resource_text("config.yaml"))
    base_dir = Path.cwd()
    if source is not None:
        text, base_dir = _load_source(source)
        config = OmegaConf.merge(config, OmegaConf.create(text))
    if overrides is not None:
        config = OmegaConf.merge(
            config, OmegaConf.from_dotlist(list(overrides))
        )
    config = OmegaConf.to_container(config, resolve=True)
    config.setdefault("base_dir", str(base_dir))
    return Config.parse_obj(config)
