"""Shared exception types.

Exit-code mapping used by the CLI: ContractViolation/ConfigError -> 2,
NumericalFailure -> 3, FormatError and other I/O problems -> 4.
"""


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class NumericalFailure(ArithmeticError):
    """A numerical operation produced NaN/Inf or a factorization failed."""


class FormatError(ValueError):
    """A file did not match its documented binary/text layout."""


class ConfigError(ValueError):
    """A configuration file or preset failed validation."""
