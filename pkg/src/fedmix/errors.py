"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, ordering)."""


class NumericalOverflowError(ArithmeticError):
    """A density or ratio evaluated to a non-finite value."""


class DegenerateClassError(RuntimeError):
    """A mixture component lost essentially all responsibility mass.

    Raised instead of silently regularizing, because vanishing mass almost
    always means the initialization left the basin the estimator needs.
    """

    def __init__(self, message, component=None, iteration=None):
        super().__init__(message)
        self.component = component
        self.iteration = iteration


class DegenerateTiltError(RuntimeError):
    """The tilted weight-precision matrix of a component is not positive definite."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class FederationError(RuntimeError):
    """Transport-level failure inside a communication round."""

    def __init__(self, message, round_index=None):
        super().__init__(message)
        self.round_index = round_index


class IncompleteRoundError(FederationError):
    """A collect phase ended without one report from every site."""


class UnsupportedConfigurationError(ValueError):
    """The requested operation is only defined for a narrower configuration."""


class ParseError(ValueError):
    """A data or config file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        super().__init__(message)
        self.path = path
        self.line = line
