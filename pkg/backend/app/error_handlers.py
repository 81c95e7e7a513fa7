import logging
from typing import Optional

import click

logger = logging.getLogger(__name__)


class EngineError(Exception):
    """Base error for the engine. Carries a human-readable detail and the stage it came from."""

    exit_code: int = 3

    def __init__(self, detail: str, stage: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        self.stage = stage

    def with_stage(self, stage: str) -> "EngineError":
        if self.stage is None:
            self.stage = stage
        return self

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.detail}"
        return self.detail


# Data / schema errors (exit code 3)

class DataError(EngineError):
    exit_code = 3


class MissingInputError(DataError):
    pass


class SchemaVersionError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class InvalidMeshError(DataError):
    pass


class EmptyResultError(DataError):
    pass


class UnknownLandmarkError(DataError):
    pass


class WhitelistError(DataError):
    pass


class OrganMismatchError(DataError):
    pass


class EmptyIndexError(DataError):
    pass


# Numerical failures (exit code 4)

class NumericalError(EngineError):
    exit_code = 4


class DegenerateAlignmentError(NumericalError):
    pass


class SingularTransformError(NumericalError):
    pass


class CycleError(NumericalError):
    pass


class DegenerateFrameError(NumericalError):
    pass


class DegenerateSpreadError(NumericalError):
    pass


class SingularFitError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, detail: str, stage_index: int, stage: Optional[str] = None):
        super().__init__(detail, stage)
        self.stage_index = stage_index


class NonPositiveScaleError(NumericalError):
    pass


class ProjectionMissError(NumericalError):
    pass


class EmptyCandidatesError(NumericalError):
    pass


class ZeroLengthRayError(NumericalError):
    pass


class ErrorHandler:
    """Turns engine errors into a logged message and a process exit code."""

    @staticmethod
    def handle(exc: Exception, stage: Optional[str] = None) -> int:
        if isinstance(exc, EngineError):
            if stage:
                exc.with_stage(stage)
            logger.error(f"{type(exc).__name__}: {exc}")
            click.echo(f"error: {exc}", err=True)
            return exc.exit_code

        logger.error(f"Unexpected failure in stage {stage or 'unknown'}: {exc}", exc_info=True)
        click.echo(f"error: [{stage or 'unknown'}] unexpected failure: {exc}", err=True)
        return NumericalError.exit_code
