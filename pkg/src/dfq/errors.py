"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DomainError(ValueError):
    """A numeric argument is outside the mathematical domain of the op."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class StructuralError(ValueError):
    """Mismatched or incomplete keyed structures (stats tables, quant specs)."""


class IngestionError(RuntimeError):
    """Dataset or checkpoint files missing, corrupt, or failing checksum."""


class DataFreeViolation(RuntimeError):
    """A data-free pipeline cell attempted to read the training split."""
