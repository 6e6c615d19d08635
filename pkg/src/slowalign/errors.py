"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class UnsupportedOperationError(TypeError):
    """An operation has no differentiable implementation on the tape."""


class NumericalFailure(ArithmeticError):
    """A numerical routine failed to converge or produced unusable output."""


class NotPositiveDefiniteError(NumericalFailure):
    pass


class DegenerateInputError(ValueError):
    """Input is well-formed but has no meaningful answer (zero norm, zero variance)."""


class ParseError(ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line
