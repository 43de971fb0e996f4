"""Exception types shared across the package.

The CLI maps these onto stable exit codes: usage problems exit 2,
data/format/I-O problems exit 1, numeric divergence exits 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward without forward)."""


class ParseError(ValueError):
    """A data file violates its schema. Carries the offending row."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class FormatError(ValueError):
    """A binary artifact is corrupt. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss. Carries the epoch."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)
        self.epoch = epoch
        self.epoch = epoch


class DataError(ValueError):
    """Inputs are readable but unusable (too few descriptors, class mismatch...)."""
