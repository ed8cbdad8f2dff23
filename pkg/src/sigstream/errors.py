"""Exception hierarchy shared across the package.

Each class carries a ``exit_code`` so the CLI can map failures onto its
stable exit-code contract (1 validation, 2 I/O, 3 numeric).
"""


class SigStreamError(Exception):
    exit_code = 1


class ShapeError(SigStreamError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SigStreamError, ValueError):
    """A documented precondition was violated."""


class ConfigError(SigStreamError, ValueError):
    """A model or experiment configuration is invalid."""


class DomainError(SigStreamError, ArithmeticError):
    """Numeric operation outside its domain, or a non-finite result."""

    exit_code = 3


class DegenerateStatisticsError(DomainError):
    """Standardisation statistics cannot be fitted (zero std, range or sum)."""


class LoadError(SigStreamError, IOError):
    """Input files are missing, malformed, or inconsistent."""

    exit_code = 2


class DivergenceError(DomainError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class DegenerateInputError(ContractError):
    """A stream has no real (unmasked) points."""
