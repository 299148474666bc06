# errors.py
"""
Exception types shared by the engine, the models and the CLI.
"""


class TvsError(Exception):
    """Base class for every error raised by this package."""
    pass


class ConfigError(TvsError):
    """Invalid experiment or sampler configuration."""
    pass


class ContractError(TvsError, ValueError):
    """A caller broke an operation's precondition (e.g. an empty state set)."""
    pass


class DimensionError(TvsError, ValueError):
    """Array shapes do not match the model / dataset dimensions."""
    pass


class DegenerateJointError(TvsError):
    """All log-joints of a datapoint's state set are -inf."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class CapacityError(TvsError):
    """Exhaustive enumeration requested for too many latents."""
    pass


class SingularStatisticsError(TvsError):
    """The regularized Gram matrix of the BSC M-step could not be solved."""
    pass


class DivergenceError(TvsError):
    """A parameter update or training loss became non-finite."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class CorruptFileError(TvsError):
    """A binary container is truncated or carries a wrong magic/version."""
    pass


class ParseError(TvsError):
    """A text data file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class FitError(TvsError):
    """A model failure raised inside the fit loop, tagged with its iteration."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
