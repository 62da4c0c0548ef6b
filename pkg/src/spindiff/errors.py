"""Exception types shared by all modules.

The CLI maps each class to a distinct exit code.
"""


class InputError(ValueError):
    """Bad argument or data passed to a model function."""


class InfeasibleError(InputError):
    """A requested inversion has no solution within the model's range."""


class ConfigError(InputError):
    """Malformed or incomplete configuration."""


class FitError(RuntimeError):
    """A fit failed to converge.

    ``diagnostics`` carries whatever the failing stage knew (status,
    iteration count, cost, last parameter values).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
