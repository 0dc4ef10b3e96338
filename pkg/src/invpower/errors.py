class InvPowerError(Exception):
    """Base class for all errors raised by invpower."""


class UnsupportedDimension(InvPowerError):
    pass


class TooCoarse(InvPowerError):
    pass


class KindMismatch(InvPowerError):
    pass


class GridMismatch(InvPowerError):
    pass


class ZeroField(InvPowerError):
    pass


class InvalidExponent(InvPowerError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MissingRequired(InvPowerError):
    pass


class UnsupportedKind(InvPowerError):
    pass


class SingularSystem(InvPowerError):
    pass


class InnerSolveFailed(InvPowerError):
    def __init__(self, message, outcome=None):
        super().__init__(message)
        self.outcome = outcome


class InvariantViolation(InvPowerError):
    def __init__(self, message, entry=None):
        super().__init__(message)
        self.entry = entry


class DegenerateIterate(InvPowerError):
    """Raised when an iterate's norm leaves the representable floating point range."""
