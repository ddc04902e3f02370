"""Exception hierarchy shared by every module."""


class ISAError(Exception):
    """Base class for all library errors."""


class DimensionError(ISAError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(ISAError, ValueError):
    """A caller violated an operation's precondition."""


class DegenerateInputError(ISAError, ValueError):
    """Numerically degenerate input (zero norm, non-finite loss, ...)."""


class DegenerateMaskError(DegenerateInputError):
    """A mask has no foreground or no background at feature resolution."""

    def __init__(self, message, pair_index=None):
        if pair_index is not None:
            message = f"pair {pair_index}: {message}"
        super().__init__(message)
        self.pair_index = pair_index


class TrainingFailure(ISAError, RuntimeError):
    """Training diverged; ``trace`` holds the loss history so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class ConfigError(ISAError, ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
