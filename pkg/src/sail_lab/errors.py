"""Exception types shared across the lab."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Array shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite numbers are required."""


class StageError(RuntimeError):
    """A training stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
