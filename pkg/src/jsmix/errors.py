"""Exception types mapped to CLI exit codes."""


class InputError(ValueError):
    """Rejected user input or configuration (exit code 2)."""

    exit_code = 2


class InvariantViolation(RuntimeError):
    """A sampler invariant broke mid-chain (exit code 3).

    ``dump`` carries enough state to reproduce the failing sweep.
    """

    exit_code = 3

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
