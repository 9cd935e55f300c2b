"""Exceptions raised by the library. main.py maps them onto exit codes."""

import config


class SpectralError(Exception):
    exit_code = 1


class ConfigError(SpectralError, ValueError):
    exit_code = config.EXIT_CONFIG


class DataError(SpectralError, ValueError):
    exit_code = config.EXIT_DATA


class ShapeError(DataError):
    """Raised when array extents disagree. The message names the offending axis."""


class NumericalError(SpectralError, ArithmeticError):
    exit_code = config.EXIT_NUMERICAL


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint=None, epoch: int = -1) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class GeometryError(NumericalError):
    pass


class InsufficientCorrespondences(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    pass


class AmbiguousPose(GeometryError):
    pass


class RegistrationError(GeometryError):
    pass
