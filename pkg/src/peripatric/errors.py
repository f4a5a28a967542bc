"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid model or run configuration."""


class EventCapExceeded(RuntimeError):
    """A simulation hit its event budget; usually the rates are misconfigured."""


class DegenerateGeneratorError(ValueError):
    """A rate matrix has no transitions at all, so it cannot be uniformized."""


class InvalidStateError(ValueError):
    """An ancestral or coalescent state violates its invariants."""
