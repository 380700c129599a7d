"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class IgcamError(Exception):
    exit_code = 1
    category = "error"


class UsageError(IgcamError):
    exit_code = 2
    category = "usage"


class InputFormatError(IgcamError):
    """A file could not be decoded or is structurally inconsistent."""

    exit_code = 3
    category = "input-format"


class ValidationError(IgcamError):
    """Numeric or semantic validation failed (non-finite values, ranges, shapes)."""

    exit_code = 4
    category = "validation"


class StructuralError(ValidationError):
    """Tensor shapes do not compose through the model."""


class UndefinedMetricError(ValidationError):
    """A metric is undefined for its input, e.g. EBPG of an all-zero map."""
