"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class DegenerateAxisError(ContractError):
    """A normalization axis is too small to normalize over."""


class OutOfVocabularyError(ContractError, IndexError):
    """A token id lies outside the vocabulary / embedding table."""


class NumericError(ArithmeticError):
    """Non-finite values reached an operation that requires finite input."""


class ProtocolError(RuntimeError):
    """The continual-learning protocol was violated (e.g. tasks out of order)."""


class ConfigError(ValueError):
    """Invalid experiment or data configuration."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
