"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ConfigError -> 2, InputError -> 3,
NumericError -> 4.
"""


class DeskbertError(Exception):
    """Base class for all package errors."""


class ConfigError(DeskbertError):
    """Invalid configuration (hyperparameters, dimensions derived from config)."""


class DimensionError(ConfigError):
    """Tensor shape mismatch."""


class InputError(DeskbertError):
    """Invalid runtime data (token ids, masks, document lengths, budgets)."""


class BatchError(InputError):
    """Malformed packed batch (bad cu_seqlens, inconsistent lengths)."""


class CheckpointError(InputError):
    """Unreadable or inconsistent checkpoint file."""


class CapacityError(InputError):
    """A requested resource does not fit the stated budget."""


class NumericError(DeskbertError):
    """Non-finite values where finite ones are required."""


class TrainingDiverged(NumericError):
    """Training aborted on a non-finite loss.

    Carries a reference to the last checkpoint that was written before the
    divergence, if any.
    """

    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
