"""Exception hierarchy shared across the package."""


class Vis2IRError(Exception):
    """Base class for all package errors."""


class ConfigurationError(Vis2IRError, ValueError):
    pass


class GenerationError(Vis2IRError):
    pass


class AnnotationParseError(Vis2IRError, ValueError):
    pass


class SchemaVersionError(Vis2IRError):
    """A file declares a schema this version cannot read."""


class IntegrityError(Vis2IRError):
    """A checkpoint file is truncated or a blob checksum does not match."""


class ConfigHashMismatch(Vis2IRError):
    pass


class NumericalFailure(Vis2IRError, FloatingPointError):
    pass


class TrainingFailure(Vis2IRError):
    pass
