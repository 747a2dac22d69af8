"""Exception types raised across the package."""


class CRRNError(Exception):
    """Base class for all package errors."""


class DimensionError(CRRNError, ValueError):
    """Array shapes or resolutions are incompatible."""


class ConfigurationError(CRRNError, ValueError):
    """A configuration value violates its constraints."""


class ImageFormatError(CRRNError, ValueError):
    """An image file has an unsupported format or bit depth."""


class IntegrityError(CRRNError):
    """A stored artifact is corrupt or truncated."""


class SchemaVersionError(CRRNError):
    """A stored artifact was written with an incompatible schema version."""
