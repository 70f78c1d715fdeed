"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: DataError (and the
checkpoint/training subfamilies) exit 2, verification failures exit 3,
argument problems exit 1.
"""


class LabelMatchError(Exception):
    """Base class for all errors raised by this package."""


class DataError(LabelMatchError):
    """Malformed or inconsistent dataset, vocabulary, or verbalizer input."""


class CheckpointError(LabelMatchError):
    """Unreadable or mismatched checkpoint file."""


class TrainingError(LabelMatchError):
    """Invalid training state, e.g. non-finite gradients."""


class VerificationError(LabelMatchError):
    """A gradient check exceeded its threshold."""
