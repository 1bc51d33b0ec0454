"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated by the caller."""


class CorpusError(ValueError):
    """Base class for problems reading or validating a corpus."""


class CorpusParseError(CorpusError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CorpusIntegrityError(CorpusError):
    """Feature file does not line up with the nodes declared in the graph file."""


class ValidationError(CorpusError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a parameter becomes non-finite during training."""
