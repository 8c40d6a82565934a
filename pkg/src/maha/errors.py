"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Bad configuration: unknown keys, unparsable values, invalid combinations."""


class MissingArtifactError(FileNotFoundError):
    """A required run artifact (checkpoint, clusters.json, ...) is absent."""


class NumericalError(RuntimeError):
    """Training or evaluation produced NaN/Inf or an unrecoverable numeric failure."""
