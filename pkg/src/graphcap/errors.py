"""Exception types shared across the package."""


class GraphcapError(Exception):
    """Base class for all package errors."""


class ParseError(GraphcapError):
    """Caption does not conform to the template grammar."""


class ConfigError(GraphcapError):
    """Invalid configuration value."""


class SchemaError(GraphcapError):
    """Manifest or trace file violates the schema.

    Carries the JSON path of the first offending field.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class DimensionError(GraphcapError):
    """Tensor shapes incompatible with the configured dimensions."""


class VocabularyError(GraphcapError):
    """Word has no mapping in the relevant vocabulary."""


class EmptyCorpusError(GraphcapError):
    """Metric corpus is empty (or too small for document frequencies)."""


class DivergenceError(GraphcapError):
    """Training loss became non-finite."""


class NonFiniteGradientError(GraphcapError):
    """Optimizer received a NaN or infinite gradient."""


class VersionError(GraphcapError):
    """Checkpoint format version mismatch."""


class CorruptionError(GraphcapError):
    """Checkpoint payload failed its checksum."""
