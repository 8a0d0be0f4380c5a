"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates an operation's preconditions (shapes, ranges, missing fields)."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class TrainingDiverged(NumericError):
    pass


class FormatError(ValueError):
    """A file could not be parsed: bad magic, version, checksum or truncated payload."""
