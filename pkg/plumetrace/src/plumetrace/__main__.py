"""Main script.

This module provides the command line interface. Every command loads a
scenario, computes everything in memory and writes its outputs only once
all computations have succeeded.

"""
import logging
from pathlib import Path
from typing import Callable, List, Optional, TypeVar

import typer

from plumetrace import log
from plumetrace.calibration import ExperimentalReadings
from plumetrace.config import Config, get_config
from plumetrace.errors import NumericalError
from plumetrace.export import (
    write_field_series,
    write_json,
    write_manifest,
    write_table,
)
from plumetrace.mesh import save_mesh
from plumetrace.resources import scenario_names
from plumetrace.scenario import (
    Scenario,
    build_mesh,
    build_sensors,
    calibrate as run_calibration,
    invert as run_inversion,
    simulate as run_simulation,
)
from plumetrace.sensing import read_measurements, write_measurements
from plumetrace.utils import resolve_threads

cli = typer.Typer()  # this is actually callable and thus can be an entry point

logger = logging.getLogger(__name__)

T = TypeVar("T")

VALIDATION_EXIT_CODE = 1
NUMERICAL_EXIT_CODE = 2

ConfigOption = typer.Option(
    ..., "--config", "-C", help="Scenario file or builtin:<name>."
)
EntriesOption = typer.Option(
    None, "--set", "-c", help="Configuration entries, e.g. mesh.nx=64."
)
ThreadsOption = typer.Option(
    None,
    "--threads",
    envvar="PLUMETRACE_THREADS",
    help="Worker threads (default: available cores).",
)
OutOption = typer.Option(
    None, "--out", help="Output directory (default: from the scenario)."
)
VerbosityOption = typer.Option(
    "INFO", "--verbosity", "-v", help="Verbosity level."
)


def guarded(action: Callable[[], T]) -> T:
    """Runs an action, mapping failures to exit codes."""
    try:
        return action()
    except NumericalError as e:
        logger.error("Numerical failure!", exc_info=e)
        raise typer.Exit(NUMERICAL_EXIT_CODE)
    except (ValueError, OSError) as e:
        logger.error("Invalid input!", exc_info=e)
        raise typer.Exit(VALIDATION_EXIT_CODE)


def load(
    config: str,
    entries: Optional[List[str]],
    verbosity: log.Verbosity,
) -> Config:
    log.configure(verbosity)

    logger.info("Loading config...")
    try:
        loaded = get_config(config, entries)
    except ValueError as e:
        logger.error("Failed to parse config!", exc_info=e)
        raise typer.Exit(VALIDATION_EXIT_CODE)
    logger.info("Config loaded!")
    return loaded


def output_directory(config: Config, out: Optional[Path]) -> Path:
    directory = out if out is not None else config.output.directory
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def existing_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ValueError(f"{what} file '{path}' does not exist.")
    return path


@cli.command()
def mesh(
    config: str = ConfigOption,
    entries: Optional[List[str]] = EntriesOption,
    out: Optional[Path] = OutOption,
    verbosity: log.Verbosity = VerbosityOption,
) -> None:
    """Generates the scenario mesh and writes it in the text format."""

    cfg = load(config, entries, verbosity)
    generated = guarded(lambda: build_mesh(cfg.mesh, cfg))

    directory = output_directory(cfg, out)
    path = directory / "mesh.txt"
    save_mesh(generated, path)
    write_manifest(directory, "mesh", cfg.dump(), [path])
    logger.info(f"Mesh written to {path}.")


@cli.command()
def simulate(
    config: str = ConfigOption,
    entries: Optional[List[str]] = EntriesOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
    verbosity: log.Verbosity = VerbosityOption,
) -> None:
    """Runs the truth source forward and writes synthetic sensor data."""

    cfg = load(config, entries, verbosity)

    def compute():
        scenario = Scenario.build(cfg, resolve_threads(threads))
        return scenario, run_simulation(scenario)

    scenario, result = guarded(compute)

    directory = output_directory(cfg, out)
    outputs = [directory / "clean.csv", directory / "measurements.csv"]
    write_measurements(outputs[0], result.sensors, result.clean)
    write_measurements(outputs[1], result.sensors, result.measurements.d)
    if cfg.output.vtk:
        outputs += write_field_series(
            directory / "concentration",
            "concentration",
            scenario.mesh,
            result.field.values,
            "concentration",
            cfg.output.every,
        )
    write_manifest(
        directory,
        "simulate",
        cfg.dump(),
        outputs,
        seed=cfg.noise.seed,
        sigma_noise=result.measurements.sigma_noise,
    )
    logger.info(f"Simulation outputs written to {directory}.")


@cli.command()
def invert(
    config: str = ConfigOption,
    measurements: Path = typer.Option(
        ..., "--measurements", help="Sensor CSV to invert."
    ),
    entries: Optional[List[str]] = EntriesOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
    verbosity: log.Verbosity = VerbosityOption,
) -> None:
    """Reconstructs the source from sensor data and forecasts the plume."""

    cfg = load(config, entries, verbosity)

    def compute():
        scenario = Scenario.build(cfg, resolve_threads(threads))
        values = read_measurements(
            existing_file(measurements, "Measurements"), build_sensors(cfg)
        )
        return scenario, run_inversion(scenario, values)

    scenario, result = guarded(compute)

    directory = output_directory(cfg, out)
    report = result.report
    outputs = [
        directory / "report.json",
        directory / "residuals.csv",
        directory / "trajectory.csv",
    ]
    write_json(outputs[0], report.to_dict())
    write_table(outputs[1], result.residuals)
    write_table(outputs[2], report.atoms.trajectory(report.dt))
    if cfg.output.vtk:
        outputs += write_field_series(
            directory / "source",
            "source",
            scenario.mesh,
            result.source.values,
            "source",
            cfg.output.every,
        )
        outputs += write_field_series(
            directory / "forecast",
            "forecast",
            scenario.mesh,
            result.forecast.values,
            "concentration",
            cfg.output.every,
        )
    write_manifest(
        directory,
        "invert",
        cfg.dump(),
        outputs,
        measurements=str(measurements),
        converged=report.converged,
    )
    if not report.converged:
        logger.warning("Reconstruction did not converge.")
    logger.info(f"Inversion outputs written to {directory}.")


@cli.command()
def calibrate(
    config: str = ConfigOption,
    readings: Path = typer.Option(
        ..., "--readings", help="Experimental readings CSV."
    ),
    entries: Optional[List[str]] = EntriesOption,
    threads: Optional[int] = ThreadsOption,
    out: Optional[Path] = OutOption,
    verbosity: log.Verbosity = VerbosityOption,
) -> None:
    """Sweeps candidate diffusion coefficients against line readings."""

    cfg = load(config, entries, verbosity)

    def compute():
        data = ExperimentalReadings.from_csv(
            existing_file(readings, "Readings")
        )
        scenario = Scenario.build(cfg, resolve_threads(threads))
        return run_calibration(scenario, data)

    result = guarded(compute)

    directory = output_directory(cfg, out)
    outputs = [directory / "pi.csv", directory / "summary.json"]
    write_table(outputs[0], result.table)
    write_json(outputs[1], {"best": result.summary()})
    write_manifest(
        directory, "calibrate", cfg.dump(), outputs, readings=str(readings)
    )
    logger.info(f"Calibration outputs written to {directory}.")


@cli.command()
def scenarios() -> None:
    """Lists the shipped scenarios."""

    for name in scenario_names():
        typer.echo(f"builtin:{name}")


if __name__ == "__main__":
    # entry point for "python -m"
    cli()
