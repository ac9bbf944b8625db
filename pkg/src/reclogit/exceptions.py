"""Exception hierarchy for the reclogit package."""


class RecLogitError(Exception):
    """Base class for all reclogit errors."""


class InputError(RecLogitError, ValueError):
    """Invalid user-supplied data or configuration."""


class ParseError(InputError):
    """A file could not be parsed. Carries the path and, when known, the
    1-based line number of the offending row."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        if path is not None:
            prefix = str(path) if line is None else f"{path}:{line}"
            message = f"{prefix}: {message}"
        super().__init__(message)


class DimensionError(InputError):
    """Shapes of parameters, features, or graphs do not agree."""


class StructuralError(InputError):
    """A trajectory step is not a feasible link-to-link transition."""


class NumericError(RecLogitError):
    """A numerical computation failed."""


class ValueSolveError(NumericError):
    """The value-function system has no usable solution."""

    def __init__(self, message, condition_estimate=None):
        self.condition_estimate = condition_estimate
        if condition_estimate is not None:
            message = f"{message} (condition estimate {condition_estimate:.3e})"
        super().__init__(message)


class NonConvergenceError(NumericError):
    """An iterative solve hit its iteration cap. Carries the last residual."""

    def __init__(self, message, residual=None):
        self.residual = residual
        if residual is not None:
            message = f"{message} (last residual {residual:.3e})"
        super().__init__(message)


class LayerOverflowError(NumericError):
    """A residual layer produced a non-finite value. Names the layer."""

    def __init__(self, layer, detail=""):
        self.layer = layer
        message = f"non-finite value in residual layer {layer}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class DivergenceError(NumericError):
    """Training reached a non-finite loss. Carries the last finite state."""

    def __init__(self, message, last_params=None, last_loss=None):
        self.last_params = last_params
        self.last_loss = last_loss
        super().__init__(message)


class SingularInformationError(NumericError):
    """The observed information matrix is singular; the model is likely
    unidentified on this data. Review identifiability before trusting
    standard errors."""


class IncompleteRouteError(RecLogitError):
    """Greedy route generation hit the step cap or a dead end. Carries the
    partial path walked so far."""

    def __init__(self, message, partial=()):
        self.partial = list(partial)
        super().__init__(message)
