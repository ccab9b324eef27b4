"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with inputs that break its contract."""


class FormatError(RuntimeError):
    """An on-disk artifact (minicube directory, checkpoint) is malformed."""


class NoValidPixelsError(RuntimeError):
    """A loss/metric was requested on a batch with an all-zero validity mask."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite; carries the last finite checkpoint."""

    def __init__(self, message, state_dict=None, log=None):
        super().__init__(message)
        self.state_dict = state_dict
        self.log = log


class InsufficientDataError(RuntimeError):
    """A baseline or fit has too little history to produce an estimate."""
