"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes; library callers can catch
the base class or the specific kind they care about.
"""


class PatchTagError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PatchTagError):
    """Operands have inconsistent or invalid dimensions."""


class ParseError(PatchTagError):
    """A file or stream is not in the expected format."""


class SchemaError(PatchTagError):
    """A parsed file is structurally valid but violates the schema."""


class IntegrityError(PatchTagError):
    """Byte ranges or checksums of a container are inconsistent."""


class ConfigError(PatchTagError):
    """A configuration value is out of range or incoherent."""


class DataError(PatchTagError):
    """Predictions, ground truth, or inputs do not line up."""


class InputError(PatchTagError):
    """An input image or file could not be decoded."""


class UsageError(PatchTagError):
    """Command-line arguments are missing or malformed."""
