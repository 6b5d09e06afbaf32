"""Exception types raised across the package."""


class LcflError(Exception):
    """Base class for all package errors."""


class ShapeError(LcflError, ValueError):
    pass


class EmptyInputError(LcflError, ValueError):
    pass


class ParameterError(LcflError, ValueError):
    pass


class UnsupportedOperationError(LcflError):
    pass


class DegenerateFamilyError(LcflError, ValueError):
    pass


class InsufficientPoolError(LcflError, ValueError):
    pass


class UnsupportedRotationError(LcflError, ValueError):
    pass


class FormatError(LcflError, ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f" ({path})" if path is not None else ""
        super().__init__(f"{message}{where}{src}")


class SingularityError(LcflError, ArithmeticError):
    pass


class DivergenceError(LcflError, ArithmeticError):
    """Non-finite loss or parameters during training."""

    def __init__(self, message: str, iteration: int | None = None, client_id: int | None = None):
        self.iteration = iteration
        self.client_id = client_id
        tags = []
        if client_id is not None:
            tags.append(f"client {client_id}")
        if iteration is not None:
            tags.append(f"iteration {iteration}")
        suffix = f" [{', '.join(tags)}]" if tags else ""
        super().__init__(message + suffix)


class EvaluationError(LcflError, ArithmeticError):
    pass


class IncompleteProtocolError(LcflError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(f"({i},{j})" for i, j in self.missing[:20])
        more = "" if len(self.missing) <= 20 else f" ... (+{len(self.missing) - 20} more)"
        super().__init__(f"missing half-distances for pairs: {shown}{more}")


class ContractError(LcflError, ValueError):
    pass


class ComparabilityError(LcflError, ValueError):
    pass


class ConfigError(LcflError, ValueError):
    """Invalid experiment configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
