"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`IvdrfError`.
The CLI maps the four intermediate families onto distinct exit codes.
"""


class IvdrfError(Exception):
    """Base class for all package errors."""


class DataError(IvdrfError):
    """Problems with input data or its schema."""


class SchemaError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyDataError(DataError):
    pass


class MisuseError(DataError):
    """An operation was called on data it does not apply to."""


class PlanError(IvdrfError):
    """Invalid fold plan or cross-fitting configuration."""


class NumericalError(IvdrfError):
    """A numerical routine could not produce a trustworthy answer."""


class InsufficientSupportError(NumericalError):
    pass


class RankDeficiencyError(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ConditioningError(NumericalError):
    pass


class BandwidthSelectionError(NumericalError):
    def __init__(self, message, failing=()):
        super().__init__(message)
        self.failing = list(failing)


class LowDensityError(NumericalError):
    pass


class PropensityError(NumericalError):
    pass


class NuisanceTrainingError(NumericalError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class FoldError(NumericalError):
    def __init__(self, message, fold=None, component=None):
        super().__init__(message)
        self.fold = fold
        self.component = component


class BootstrapError(NumericalError):
    pass


class BenchmarkError(NumericalError):
    pass


class DiagnosticsError(IvdrfError):
    """Identification preconditions are not met."""


class CoverageGapError(DiagnosticsError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class UrwfRefusal(DiagnosticsError):
    pass
