"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A hyperparameter or threshold is outside its valid range."""


class ShapeError(ValueError):
    """Inputs that must be indexed identically are not."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class EmptyEvaluationError(ValueError):
    """An evaluation was requested over an empty set."""


class GenerationError(RuntimeError):
    """A scene specification could not be realized within the retry budget."""


class DivergenceError(RuntimeError):
    """Optimization blew up; ``trajectory`` holds the history up to the abort."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
