"""Exception taxonomy shared across the package."""


class KPrismError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KPrismError, ValueError):
    """Invalid configuration values (dimensions, counts, probabilities)."""


class ShapeError(KPrismError, ValueError):
    """Array/tensor shape or channel-count mismatch."""


class IngestionError(KPrismError):
    """Missing, corrupt, or invariant-violating data file."""


class ContractError(KPrismError, ValueError):
    """Invalid mode/field combination passed to a model entry point."""


class InputError(KPrismError, ValueError):
    """Out-of-range user input (e.g. a click outside the image)."""


class NumericError(KPrismError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UnknownClassError(KPrismError, KeyError):
    """Class id not present in the semantic prompt bank."""
