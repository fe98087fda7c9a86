"""Exception hierarchy shared by every module in the package."""


class DialogMemError(Exception):
    """Base class for all package errors."""


class ShapeError(DialogMemError, ValueError):
    pass


class DegenerateNormError(DialogMemError, ArithmeticError):
    pass


class ContractError(DialogMemError, ValueError):
    pass


class DeterminismError(DialogMemError, RuntimeError):
    pass


class RangeError(DialogMemError, ValueError):
    pass


class DimensionError(DialogMemError, ValueError):
    pass


class VocabMismatchError(DialogMemError, ValueError):
    pass


class FormatError(DialogMemError, ValueError):
    """Malformed input file. Carries the 1-based line number when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None and line is not None:
            where = f"{path}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        elif path is not None:
            where = f"{path}: "
        super().__init__(where + message)


class UnknownCandidateError(DialogMemError, KeyError):
    def __init__(self, response):
        self.response = response
        super().__init__(f"system response not in candidate set: {response!r}")

    def __str__(self):
        return self.args[0]


class TrainingDivergedError(DialogMemError, FloatingPointError):
    """Non-finite loss or gradient during training; ``diagnostics`` holds the context."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)
