"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, tag)."""


class UsageError(RuntimeError):
    """An object was used out of order, e.g. backward before forward."""
