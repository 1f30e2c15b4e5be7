"""Turns a validated configuration into runnable pipelines."""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from plumetrace.calibration import (
    CalibrationSetup,
    CandidateGrid,
    ExperimentalReadings,
    SweepResult,
    default_kappa_grid,
    nodes_in_disc,
    sweep_kappa,
)
from plumetrace.config import Config, MeshParams, SensorParams, WindParams
from plumetrace.fem import (
    OperatorSet,
    assemble,
    discrete_divergence_diagnostic,
)
from plumetrace.lasso import InversionStack
from plumetrace.mesh import Mesh, classify_boundary, generate_rect_mesh
from plumetrace.mesh import load_mesh
from plumetrace.pdap import (
    PdapConfig,
    ReconstructionReport,
    pdap_run,
    predict,
    relative_error,
)
from plumetrace.sensing import (
    MeasurementSet,
    SensorConfig,
    add_noise,
    assemble_observation,
    grid_positions,
)
from plumetrace.sources import (
    ParameterCurve,
    ShapeParams,
    SourceField,
    atoms_to_source,
    sample_curve,
)
from plumetrace.transport import SpaceTimeField, TimeGrid, solve_forward
from plumetrace.wind import CompositeWind, NodalWind, WindField, wind_type

logger = logging.getLogger(__name__)


def build_mesh(params: MeshParams, config: Config) -> Mesh:
    if params.file is not None:
        mesh = load_mesh(config.resolve(params.file))
    else:
        mesh = generate_rect_mesh(
            params.width, params.height, params.nx, params.ny
        )
    logger.info(
        f"Mesh with {mesh.n_nodes} nodes and {mesh.n_triangles} triangles."
    )
    return mesh


def build_wind(params: WindParams, mesh: Mesh, config: Config) -> WindField:
    components = [
        wind_type(component.type)(**component.params)
        for component in params.components
    ]
    if params.file is not None:
        path = config.resolve(params.file)
        components.append(NodalWind.from_csv(mesh, path))
    if len(components) == 1:
        wind = components[0]
    else:
        wind = CompositeWind(components)
    divergence = discrete_divergence_diagnostic(mesh, wind)
    if divergence > params.divergence_tol:
        logger.warning(
            f"Wind is not divergence free: max elementwise divergence "
            f"{divergence:.3g}."
        )
    return wind


def build_curve(config: Config) -> Optional[ParameterCurve]:
    truth = config.truth
    if truth is None:
        return None
    return ParameterCurve(
        times=np.array([b.t for b in truth.breakpoints]),
        intensities=np.array([b.intensity for b in truth.breakpoints]),
        locations=np.array([(b.x, b.y) for b in truth.breakpoints]),
        window=truth.window,
    )


def sample_times(params: SensorParams, config: Config) -> np.ndarray:
    sampling = params.sampling
    stop = config.time.t_obs if sampling.stop is None else sampling.stop
    step = config.time.dt if sampling.step is None else sampling.step
    if not step > 0 or stop < sampling.start:
        raise ValueError("Sampling needs a positive step and stop >= start.")
    count = int(math.floor((stop - sampling.start) / step + 1e-9)) + 1
    return sampling.start + step * np.arange(count)


def build_sensors(config: Config) -> SensorConfig:
    params = config.sensors
    if params is None:
        raise ValueError("Scenario defines no sensors.")
    if params.grid is not None:
        positions = grid_positions(
            config.mesh.width,
            config.mesh.height,
            params.grid.nx,
            params.grid.ny,
            params.grid.margin,
        )
    else:
        positions = np.array(params.positions, dtype=float)
    rho_x = params.rho_x or 2 * config.mesh.spacing
    rho_t = params.rho_t or 2 * config.time.dt
    return SensorConfig.shared_times(
        positions,
        sample_times(params, config),
        rho_x=rho_x,
        rho_t=rho_t,
        sigma_plateau=params.sigma_plateau,
    )


@dataclass(eq=False)
class Scenario:
    config: Config
    mesh: Mesh
    wind: WindField
    ops: OperatorSet
    grid: TimeGrid
    shape: ShapeParams
    truth: Optional[ParameterCurve]
    threads: int = 1

    @classmethod
    def build(cls, config: Config, threads: int = 1) -> "Scenario":
        mesh = build_mesh(config.mesh, config)
        wind = build_wind(config.wind, mesh, config)
        mesh = classify_boundary(mesh, wind)
        ops = assemble(mesh, wind, config.kappa)
        return cls(
            config=config,
            mesh=mesh,
            wind=wind,
            ops=ops,
            grid=TimeGrid(config.time.dt, config.time.n_steps),
            shape=ShapeParams(**config.shape.dict()),
            truth=build_curve(config),
            threads=threads,
        )

    @property
    def prediction_grid(self) -> TimeGrid:
        t_pred = self.config.time.t_pred
        return self.grid if t_pred is None else self.grid.extended(t_pred)

    def pdap_config(self) -> PdapConfig:
        return PdapConfig(**self.config.pdap.dict())

    def truth_field(
        self, grid: TimeGrid
    ) -> Tuple[SourceField, SpaceTimeField]:
        if self.truth is None:
            raise ValueError("Scenario defines no truth curve.")
        source = sample_curve(
            self.truth, grid, self.shape, self.mesh, self.ops.M
        )
        return source, solve_forward(self.ops, source, grid)


@dataclass(eq=False)
class Simulation:
    sensors: SensorConfig
    source: SourceField
    field: SpaceTimeField
    clean: np.ndarray
    measurements: MeasurementSet


def simulate(scenario: Scenario) -> Simulation:
    sensors = build_sensors(scenario.config)
    obs = assemble_observation(scenario.mesh, scenario.grid, sensors)
    source, field = scenario.truth_field(scenario.prediction_grid)
    clean = obs.apply(field)
    noise = scenario.config.noise
    measurements = add_noise(clean, noise.snr, noise.seed)
    logger.info(
        f"Simulated {sensors.n_observations} readings from "
        f"{sensors.n_sensors} sensors, noise level "
        f"{measurements.sigma_noise:.3g}."
    )
    return Simulation(sensors, source, field, clean, measurements)


def measurement_set(values: np.ndarray, config: Config) -> MeasurementSet:
    """Wraps read measurements with the configured or estimated noise level.

    Without an explicit sigma the level follows from the configured SNR,
    since the data mean square is (1 + snr^2) sigma^2.
    """
    noise = config.noise
    if noise.sigma is not None:
        sigma = noise.sigma
    elif math.isinf(noise.snr) or len(values) == 0:
        sigma = 0.0
    else:
        sigma = float(np.sqrt(np.mean(values**2) / (1 + noise.snr**2)))
    return MeasurementSet(values, sigma, noise.seed, noise.snr)


@dataclass(eq=False)
class Inversion:
    sensors: SensorConfig
    report: ReconstructionReport
    source: SourceField
    forecast: SpaceTimeField
    residuals: pd.DataFrame


def invert(scenario: Scenario, values: np.ndarray) -> Inversion:
    sensors = build_sensors(scenario.config)
    obs = assemble_observation(scenario.mesh, scenario.grid, sensors)
    data = measurement_set(values, scenario.config)
    stack = InversionStack.build(
        scenario.ops, scenario.grid, obs, scenario.shape, scenario.threads
    )
    report = pdap_run(stack, data, scenario.pdap_config())
    t_pred = scenario.prediction_grid.horizon
    forecast = predict(report.atoms, stack, t_pred)
    source = atoms_to_source(report.atoms, stack.projector, forecast.grid)

    if scenario.truth is not None:
        _, truth = scenario.truth_field(forecast.grid)
        report.forecast_error = relative_error(
            scenario.ops.M, forecast.final, truth.final
        )
        logger.info(
            f"Forecast error at t={t_pred:g} s: {report.forecast_error:.3%}."
        )

    residuals = sensors.observation_table()
    residuals["measured"] = data.d
    residuals["predicted"] = report.predicted
    residuals["residual"] = report.predicted - data.d
    return Inversion(sensors, report, source, forecast, residuals)


def calibration_setup(scenario: Scenario) -> CalibrationSetup:
    params = scenario.config.calibration
    if params.injection is None or params.line is None:
        raise ValueError("Calibration needs an injection patch and a line.")
    nodes = nodes_in_disc(
        scenario.mesh, params.injection.center, params.injection.radius
    )
    return CalibrationSetup(
        mesh=scenario.mesh,
        wind=scenario.wind,
        volumetric_source=np.full(scenario.mesh.n_nodes, params.source),
        patches=((nodes, params.injection.value),),
        start=params.line.start,
        direction=params.line.direction,
        length=params.line.length,
        n_points=params.line.n_points,
    )


def candidate_grid(config: Config) -> CandidateGrid:
    kappas = config.calibration.kappas
    return default_kappa_grid() if kappas is None else CandidateGrid(kappas)


def calibrate(
    scenario: Scenario, readings: ExperimentalReadings
) -> SweepResult:
    return sweep_kappa(
        calibration_setup(scenario),
        candidate_grid(scenario.config),
        readings,
        scenario.threads,
    )
