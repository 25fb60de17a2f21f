"""Exception hierarchy shared by every pqadv module."""


class PqadvError(Exception):
    """Base class for all errors raised by this package."""


class UnknownClass(PqadvError, ValueError):
    pass


class ParamOutOfRange(PqadvError, ValueError):
    def __init__(self, field, value, bounds=None):
        self.field = field
        self.value = value
        self.bounds = bounds
        msg = f"parameter {field!r}={value!r} out of range"
        if bounds is not None:
            msg += f" {bounds}"
        super().__init__(msg)


class ZeroSignal(PqadvError, ValueError):
    pass


class ShapeMismatch(PqadvError, ValueError):
    pass


class LengthMismatch(PqadvError, ValueError):
    pass


class IoFailure(PqadvError, OSError):
    pass


class ManifestMismatch(PqadvError, ValueError):
    pass


class NotConverged(PqadvError, RuntimeError):
    pass


class DegenerateGradient(PqadvError, RuntimeError):
    pass


class EmptySet(PqadvError, ValueError):
    pass


class InsufficientData(PqadvError, ValueError):
    pass


class TooFewPoints(PqadvError, ValueError):
    pass


class PerplexityTooLarge(PqadvError, ValueError):
    pass


class ConfigInvalid(PqadvError, ValueError):
    def __init__(self, field, reason):
        self.field = field
        super().__init__(f"{field}: {reason}")


class MissingCell(PqadvError, KeyError):
    pass
