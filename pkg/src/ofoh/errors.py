"""Exception taxonomy shared across the package."""


class OfohError(Exception):
    """Base class for all package errors."""


class ShapeError(OfohError):
    """Operand shapes are incompatible. The message names both shapes."""


class ContractError(OfohError):
    """A documented precondition was violated by the caller."""


class DegenerateGlobalError(OfohError):
    """Global feature collapsed to (near) zero norm; fusion cannot proceed."""


class ProtocolError(OfohError):
    """Retrieval protocol violated, e.g. a query with no valid gallery match."""


class DataError(OfohError):
    """A dataset file is missing, corrupt, or violates a record invariant."""


class ConfigError(OfohError):
    """Configuration file or flag could not be parsed or validated."""


class MissingPrerequisiteError(OfohError):
    """A pipeline stage was invoked before its required artifacts exist."""


class NumericalFailureError(OfohError):
    """Training produced a non-finite loss; the last good checkpoint is kept."""
