"""Shared exception types."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeMismatchError(ContractError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A NaN or Inf appeared in a forward computation."""


class FormatError(ValueError):
    """A file or record failed structural validation."""
