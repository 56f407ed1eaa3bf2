"""Exception types shared across the package."""


class InvariantError(ValueError):
    """An input violates a model invariant (bad costs, payoff, market...)."""


class NumericFailure(RuntimeError):
    """A numerical procedure could not produce a meaningful answer."""

    def __init__(self, kind, message):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
