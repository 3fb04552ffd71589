"""Exception hierarchy.

Every error raised for bad input derives from :class:`TraceGraphError`; the
CLI maps those to exit code 1 and anything else to exit code 2.
"""


class TraceGraphError(ValueError):
    code = "invalid_input"


class SpanSchemaError(TraceGraphError):
    code = "span_schema"


class TraceTreeError(TraceGraphError):
    """Malformed call tree. ``span_ids`` lists the offending spans."""

    code = "trace_tree"

    def __init__(self, message, span_ids=()):
        super().__init__(message)
        self.span_ids = tuple(sorted(span_ids))


class ShapeError(TraceGraphError):
    code = "shape_mismatch"


class NumericError(TraceGraphError):
    code = "non_finite"


class WindowError(TraceGraphError):
    code = "window"


class ConfigError(TraceGraphError):
    code = "config"


class TapeError(TraceGraphError):
    code = "tape"
