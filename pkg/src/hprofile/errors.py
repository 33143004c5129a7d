"""Exception hierarchy.

Every input/validation problem derives from ``InputError`` so the command
line can map it to exit code 2 without knowing the concrete type.
"""


class ProfilingError(Exception):
    """Base class for all package errors."""


class InputError(ProfilingError, ValueError):
    """Malformed or unusable input."""


class MissingColumn(InputError):
    pass


class BadEnumValue(InputError):
    def __init__(self, row, column, value):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}: column {column!r} has invalid value {value!r}")


class BadValue(InputError):
    def __init__(self, row, column, value):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}: column {column!r} has invalid value {value!r}")


class NegativeAge(InputError):
    def __init__(self, row, value):
        self.row, self.value = row, value
        super().__init__(f"row {row}: yrs_over_65 is negative ({value})")


class EmptyCohort(InputError):
    pass


class UnattainableTarget(ProfilingError):
    pass


class Separation(ProfilingError):
    pass


class RankDeficient(ProfilingError):
    pass


class ZeroVariance(ProfilingError):
    pass


class DegenerateInput(InputError):
    pass


class BadRange(InputError):
    pass


class NonFiniteLogPosterior(ProfilingError):
    pass


class InsufficientDraws(ProfilingError):
    pass


class AllEligibleZero(InputError):
    pass


class DegeneratePanel(InputError):
    pass
