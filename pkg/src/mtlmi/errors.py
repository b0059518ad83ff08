"""Exception hierarchy shared across the package."""


class MtlmiError(Exception):
    """Base class for all package-specific errors."""


class ContractError(MtlmiError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericsError(MtlmiError):
    """A numerical failure (non-finite loss or gradient) aborted a step."""


class FormatError(MtlmiError):
    """A binary file failed structural validation; the message names the field."""


class CompatibilityError(MtlmiError):
    """Checkpoint and dataset disagree about the task set."""
