"""Exception types shared across the package."""


class ListRankError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ListRankError):
    """Input data violates a documented invariant (bad counts, shapes, ranges)."""


class ConfigurationError(ListRankError):
    """A configuration value is out of its allowed range or unknown."""


class EmptyInputError(ListRankError):
    """An operation received an empty group / list / mask it cannot work on."""


class ContractError(ListRankError):
    """A caller broke an API contract (mismatched trace, wrong first token, ...)."""


class MissingIdError(ListRankError):
    """One or more referenced ids could not be resolved."""

    def __init__(self, message: str, missing_ids: list[str]):
        super().__init__(message)
        self.missing_ids = missing_ids


class ParseError(ListRankError):
    """A file could not be parsed; carries the 1-based line number when known."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NonFiniteGradientError(ListRankError):
    """Training aborted because a gradient turned NaN/inf; names the parameter."""

    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in parameter group '{param_name}'")
        self.param_name = param_name


class CheckpointError(ListRankError):
    """Base class for checkpoint file problems."""


class CheckpointHeaderError(CheckpointError):
    """Magic string or header block is corrupt/unreadable."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported by this reader."""


class CheckpointTruncatedError(CheckpointError):
    """The payload is shorter than the manifest promises."""


class CheckpointIntegrityError(CheckpointError):
    """The stored content hash does not match the payload."""


class StoreError(ListRankError):
    """Base class for embedding-store file problems."""


class StoreFormatError(StoreError):
    """Magic/version/layout of the store file is invalid."""


class StoreIntegrityError(StoreError):
    """The store payload hash does not match."""
