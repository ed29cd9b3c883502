"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition that cannot be expressed as a shape."""


class FormatError(RuntimeError):
    """A binary file is corrupt, truncated, or has the wrong magic/version."""


class TrainingAbort(RuntimeError):
    """Training stopped because a loss term became non-finite."""

    def __init__(self, term, value):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term '{term}': {value}")
