"""Error types shared across modules.

Config/validation problems raise plain ValueError; these two classes mark
conditions the CLI maps to dedicated exit codes / messages.
"""


class ResourceLimitError(RuntimeError):
    """A lattice box, window, or coupling support exceeds its budget."""


class InsufficientDataError(RuntimeError):
    """Too few usable samples (e.g. confirmed regenerations) to proceed."""
