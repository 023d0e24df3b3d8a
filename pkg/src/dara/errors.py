"""Exception hierarchy shared across the package."""


class DaraError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DaraError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DaraError, ValueError):
    """A configuration value violates a structural constraint."""


class RegistryError(ConfigError):
    """A shared-weight handle could not be resolved."""


class DataError(DaraError, ValueError):
    """Input data is outside the accepted domain (bad token id, etc.)."""


class ContractError(DaraError, ValueError):
    """A caller broke a documented precondition."""


class GenerationError(DaraError, RuntimeError):
    """Synthetic sample generation exhausted its resampling budget."""
