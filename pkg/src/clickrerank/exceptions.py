"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """Raised when an argument breaks an operation's preconditions."""


class ConfigurationError(ValueError):
    """Raised for invalid experiment configuration (unknown policy, missing model file, ...)."""
