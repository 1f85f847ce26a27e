"""
Exception hierarchy shared by every module.

The CLI maps each family to an exit code: ConfigError -> 1,
DataError -> 2, everything else under FedSiloError -> 3.
"""


class FedSiloError(Exception):
    """Base class for all simulator errors."""


class ConfigError(FedSiloError, ValueError):
    """Raised when a configuration value is invalid or inconsistent."""


class DataError(FedSiloError):
    """Raised when input data cannot be used."""


class SchemaError(DataError):
    """Raised when a survey file does not match its schema."""


class DataParseError(DataError):
    """Raised when a survey cell is not an integer code."""


class PartitionError(DataError):
    """Raised when a silo cannot be split into train and test rows."""


class DegenerateClassError(DataError):
    """Raised when a class weight is requested for data missing a class."""


class ShapeError(FedSiloError, ValueError):
    """Raised when array dimensions do not match the model."""


class LossUndefinedError(FedSiloError):
    """Raised when a loss is requested on an empty batch."""


class ContractViolationError(FedSiloError):
    """Raised when a caller breaks a function precondition."""


class AggregationError(FedSiloError):
    """Raised when client updates cannot be averaged."""


class EmptyEvaluationError(FedSiloError):
    """Raised when metrics are requested on zero rows."""


class CapacityError(FedSiloError):
    """Raised when an exact enumeration would be too large."""


class BinReferenceError(FedSiloError, KeyError):
    """Raised when an attribution bin names an unknown player or category."""


class AttributionError(FedSiloError):
    """Raised when an attribution breaks its efficiency bound."""


class IncompatibleModelError(FedSiloError):
    """Raised when a serialized model does not fit the configured architecture."""


class NotARunDirectoryError(FedSiloError):
    """Raised when a directory holds no run manifest."""
