"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see ``slotmem.cli``):
configuration problems, numeric failures during computation, and I/O
failures are reported differently so scripted callers can react.
"""


class SlotMemError(Exception):
    """Base class for package errors."""


class ConfigError(SlotMemError):
    """Invalid configuration: bad shapes, ranges, or unresolvable presets."""


class NumericError(SlotMemError):
    """Non-finite values or violated numeric invariants at runtime."""


class TraceFormatError(SlotMemError):
    """Malformed access-trace records."""
