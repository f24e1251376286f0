"""Exception hierarchy shared across the simulator.

Every error carries a ``category`` used by the CLI/service to map failures
to exit codes and HTTP payloads: "config", "data" or "numeric".
"""


class FedSpectraError(Exception):
    category = "data"


class ConfigError(FedSpectraError):
    category = "config"


class DataError(FedSpectraError):
    category = "data"


class NumericError(FedSpectraError):
    category = "numeric"


class BadRange(ConfigError):
    """Interval bounds are inverted or out of the allowed domain."""


class BadRank(ConfigError):
    """Whitening rank outside [1, dim)."""


class BadRatio(ConfigError):
    """Class ratios do not sum to one."""


class IncompatibleRegistry(DataError):
    """Two parameter vectors have different layout registries."""


class ShapeMismatch(DataError):
    """Grid or vector dimensions disagree."""


class GridTooSmall(DataError):
    """Grid smaller than the augmentation kernels can pad."""


class EmptyBatch(DataError):
    """A loss was requested on an empty mini-batch."""


class EmptyClient(DataError):
    """A client shard holds no samples."""


class EmptyUpdateSet(DataError):
    """Aggregation called with no client updates."""


class EmptyGroup(DataError):
    """A grouping used for mean estimation has an empty group."""


class UnknownToken(DataError):
    """Prompt token missing from the embedding vocabulary."""


class TooFewPoints(DataError):
    """Not enough points for a k-nearest-neighbour vote."""


class DegenerateSplit(DataError):
    """Metrics need at least one normal and one abnormal sample."""


class DegenerateEmbedding(DataError):
    """All embedding vectors are identical; neighbour votes are undefined."""


class NonFiniteValue(NumericError):
    """A grid or parameter vector picked up a NaN or Inf."""
