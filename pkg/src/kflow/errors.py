"""Exception hierarchy shared across the package."""


class FlowError(Exception):
    """Base class for all kflow errors."""


class ConfigError(FlowError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(FlowError, ValueError):
    """Unreadable or degenerate input data."""


class StateError(FlowError, RuntimeError):
    """A layer or model was used before it was initialised."""


class NumericError(FlowError, ArithmeticError):
    """Non-finite values appeared in a computation.

    ``rows`` lists offending batch rows when known, ``path`` names the
    offending parameter when known.
    """

    def __init__(self, message, rows=None, path=None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []
        self.path = path


class DivergenceError(NumericError):
    """Training loss became non-finite or blew up.

    The model passed to ``train`` is restored to the last parameters that
    produced a finite loss before this is raised.
    """

    def __init__(self, message, iteration, rows=None, path=None):
        super().__init__(message, rows=rows, path=path)
        self.iteration = iteration


class SearchError(FlowError):
    """Every trial of a hyperparameter search diverged."""

    def __init__(self, message, trials):
        super().__init__(message)
        self.trials = trials
