import logging
from enum import Enum

import typer


class Verbosity(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class TyperLoggerHandler(logging.Handler):
    COLORS = {
        logging.DEBUG: typer.colors.BLACK,
        logging.INFO: typer.colors.BLUE,
        logging.WARNING: typer.colors.YELLOW,
        logging.ERROR: typer.colors.RED,
        logging.CRITICAL: typer.colors.RED,
    }

    def emit(self, record: logging.LogRecord) -> None:
        fg = self.COLORS.get(record.levelno)
        typer.secho(self.format(record), fg=fg, err=True)


def configure(verbosity: Verbosity) -> None:
    logging.basicConfig(
        format="%(levelname)s\t%(name)s\t%(message)s",
        level=verbosity.value,
        handlers=[TyperLoggerHandler()],
        force=True,
    )
