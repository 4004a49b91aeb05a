"""Exception types shared across the toolkit.

Everything raised on bad user input or bad data derives from FtscopeError,
so the CLI can map them to exit code 1. Programming errors stay as plain
Python exceptions.
"""


class FtscopeError(Exception):
    """Base class for all domain errors."""


class ContainerError(FtscopeError):
    """Malformed, inconsistent, or truncated checkpoint container file."""


class PairMismatchError(FtscopeError):
    """Operation requires an aligned pre/fine-tuned pair but got mismatches."""

    def __init__(self, report):
        self.report = report
        lines = ", ".join(f"{n}:{reason}" for n, reason in report.mismatches[:8])
        more = "" if len(report.mismatches) <= 8 else f" (+{len(report.mismatches) - 8} more)"
        super().__init__(f"checkpoint pair is not aligned: {lines}{more}")


class SchemaError(FtscopeError):
    """A JSONL record or data file violates its documented schema."""


class MissingTrialsError(FtscopeError):
    """A completion log does not cover the full template x sample grid."""

    def __init__(self, item_id, missing):
        self.item_id = item_id
        self.missing = list(missing)
        shown = ", ".join(f"({t},{s})" for t, s in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(
            f"item {item_id!r}: incomplete completion grid, "
            f"missing (template, sample) cells: {shown}{more}"
        )


class EmptySelectionError(FtscopeError):
    """A restore/selection request matched nothing."""


class DegenerateIndexError(FtscopeError):
    """Concentration requested but the index has zero finite update mass."""


class NoDataError(FtscopeError):
    """An input stream or file contained no records."""


class EmptyBucketError(FtscopeError):
    """Accuracy requested for a mastery bucket with no scored items."""


class ConfigError(FtscopeError):
    """Invalid CLI/config value; reported with the offending field name."""
