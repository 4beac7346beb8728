"""Exception hierarchy shared across the package."""


class MildError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MildError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class NotPositiveDefinite(MildError, ValueError):
    pass


class SingularMatrix(MildError, ValueError):
    pass


class SingularBlock(NotPositiveDefinite):
    pass


class EmptySequence(MildError, ValueError):
    pass


class InsufficientData(MildError, ValueError):
    pass


class DegenerateComponentWarning(UserWarning):
    """A mixture component lost (almost) all responsibility mass and was re-seeded."""


class EmptyClass(MildError, ValueError):
    pass


class NonFiniteLoss(MildError, FloatingPointError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class UnknownClass(MildError, KeyError):
    def __init__(self, label: str, known):
        self.label = label
        self.known = sorted(known)
        super().__init__(f"unknown class {label!r}; known classes: {', '.join(self.known)}")

    def __str__(self):
        return self.args[0]


class ClassMismatch(MildError, ValueError):
    pass


class IoFailure(MildError, OSError):
    pass


class VersionMismatch(MildError, ValueError):
    pass


class CorruptChecksum(MildError, ValueError):
    pass


class ParseError(MildError, ValueError):
    def __init__(self, message: str, line: int | None = None, record: int | None = None):
        self.line = line
        self.record = record
        where = []
        if record is not None:
            where.append(f"record {record}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class EmptyDataset(MildError, ValueError):
    pass


class WindowTooLong(MildError, ValueError):
    pass
