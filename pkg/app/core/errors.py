"""Exception hierarchy shared by the services, the CLI and the HTTP layer."""

from typing import Optional

EXIT_OK = 0
EXIT_VERDICT_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ABORT = 3


class LabError(Exception):
    """Base class for all errors raised by the laboratory."""


class FieldError(LabError):
    """Errors raised while parsing or evaluating field expressions."""


class FieldSyntaxError(FieldError):
    def __init__(self, message: str, text: str = "", position: Optional[int] = None):
        self.text = text
        self.position = position
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)

    def highlight(self) -> str:
        """Source line with a caret under the offending column."""
        if self.position is None:
            return self.text
        return f"{self.text}\n{' ' * self.position}^"


class FieldNameError(FieldSyntaxError):
    """Unknown identifier in an expression."""


class FieldArityError(FieldSyntaxError):
    """Wrong number of components or function arguments."""


class FieldDomainError(FieldError):
    """Evaluation outside the domain of log, sqrt or division, or a non-finite result."""


class ConfigError(LabError):
    def __init__(self, message: str, diagnostics: Optional[list[tuple[str, str]]] = None):
        self.diagnostics = diagnostics or []
        super().__init__(message)

    def render(self) -> str:
        lines = [str(self)]
        lines.extend(f"  {loc}: {msg}" for loc, msg in self.diagnostics)
        return "\n".join(lines)


class NumericalAbort(LabError):
    def __init__(self, message: str, path_index: Optional[int] = None, step: Optional[int] = None):
        self.path_index = path_index
        self.step = step
        super().__init__(message)


class EstimatorError(LabError):
    """Invalid estimator request (neighbour count, boundary time index)."""


class ShapeMismatchError(LabError):
    pass
