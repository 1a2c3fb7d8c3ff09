"""
Error types raised across the package
"""
from typing import Optional


class SMLError(Exception):
    """Base class for every error raised by the package"""


class ConfigError(SMLError, ValueError):
    """Experiment configuration could not be parsed or validated"""


class HashMismatchError(ConfigError):
    """A config snapshot no longer matches its recorded hash"""

    def __init__(self, expected: str, actual: str):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Config hash mismatch: recorded {expected}, snapshot hashes to {actual}")


class InvalidGraphError(SMLError, ValueError):
    """Agent graph or combination matrix violates its invariants"""


class ShapeError(SMLError, ValueError):
    """Array dimensions are inconsistent"""


class ConvergenceError(SMLError, ArithmeticError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class DivergenceError(SMLError, ArithmeticError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"Non-finite loss {value} at epoch {epoch}, batch {batch}")


class SignalError(SMLError, ArithmeticError):
    """Non-finite statistic fed to the diffusion recursion"""

    def __init__(self, agent: int, time_index: Optional[int] = None):
        self.agent = agent
        self.time_index = time_index
        where = f" at time {time_index}" if time_index is not None else ""
        super().__init__(f"Non-finite statistic from agent {agent}{where}")


class CoverageError(SMLError, ValueError):
    def __init__(self, agent: int, label: int):
        self.agent = agent
        self.label = label
        super().__init__(f"Holdout of agent {agent} has no samples of class {label:+d}")


class BoundsDomainError(SMLError, ValueError):
    """Inputs fall outside the domain where the consistency bound holds"""


class RiskDomainError(BoundsDomainError):
    """Network risk is not below log 2"""


class MarginDomainError(BoundsDomainError):
    """Margin d is outside (0, -log(exp(R) - 1))"""


class DataError(SMLError, ValueError):
    """Base class for data ingestion failures"""


class IdxFormatError(DataError):
    """Malformed IDX container"""


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class DimOverflowError(IdxFormatError):
    pass


class UnknownDigitError(DataError):
    pass


class EmptyClassError(DataError):
    pass


class InsufficientSamplesError(DataError):
    pass


class StageError(SMLError):
    """Wraps a failure with the experiment stage it happened in"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {cause}")
