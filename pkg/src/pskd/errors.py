"""Exception hierarchy shared across the package."""


class PSKDError(Exception):
    """Base class for every error raised by pskd."""


class ParameterError(PSKDError, ValueError):
    """An argument violates an operation's precondition."""


class NumericDomainError(PSKDError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class InternalError(PSKDError, RuntimeError):
    """Broken invariant inside the engine (e.g. an op without a backward rule)."""


class ParseError(PSKDError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PSKDError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class LoadError(PSKDError):
    """Checkpoint could not be decoded."""


class RunError(PSKDError):
    """A training run failed (divergence, non-finite loss)."""

    def __init__(self, message, epoch=None, model=None):
        self.epoch = epoch
        self.model = model
        where = []
        if model is not None:
            where.append(f"model={model}")
        if epoch is not None:
            where.append(f"epoch={epoch}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
