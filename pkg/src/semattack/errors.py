"""Exception hierarchy shared across the package."""


class SemAttackError(Exception):
    pass


class InvalidInputError(SemAttackError, ValueError):
    """Shapes, dimensions or values that violate an operation's preconditions."""


class ConfigurationError(SemAttackError, ValueError):
    pass


class TrainingError(SemAttackError, RuntimeError):
    """Raised when a training loop produces a non-finite loss."""


class OptimizationError(SemAttackError, RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory or [])


class ContractError(SemAttackError, TypeError):
    """A model does not offer a capability the caller requires (e.g. gradients)."""


class QueryBudgetError(SemAttackError, RuntimeError):
    pass


class AdapterError(SemAttackError, RuntimeError):
    """External detector service failed or answered with something unparseable."""
