"""Exception hierarchy shared across the simulator."""


class FedmaskError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedmaskError):
    """Invalid configuration value or malformed input."""


class PartitionError(FedmaskError):
    """Client partitioning could not satisfy its constraints."""


class ShapeMismatchError(FedmaskError):
    """Tensor shapes incompatible with the model architecture."""


class AggregationError(FedmaskError):
    """Model aggregation received unusable inputs."""


class DetectionError(FedmaskError):
    """Noisy-client detection cannot run on the given inputs."""
