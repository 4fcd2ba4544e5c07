"""Exception hierarchy for the trmst package."""


class TrmstError(Exception):
    """Base class for every error raised by this package."""


class DataError(TrmstError, ValueError):
    """Counting-process input violates a structural invariant."""

    def __init__(self, message, subject=None):
        if hasattr(subject, "item"):
            subject = subject.item()
        if subject is not None:
            message = f"subject {subject!r}: {message}"
        super().__init__(message)
        self.subject = subject


class EmptyInput(DataError):
    pass


class OverlappingIntervals(DataError):
    pass


class GapInFollowUp(DataError):
    pass


class EventNotTerminal(DataError):
    pass


class InconsistentFixedCovariates(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NoEvents(TrmstError):
    pass


class TauOutOfRange(TrmstError, ValueError):
    pass


class NonIdentifiable(TrmstError):
    pass


class Divergence(TrmstError):
    pass


class NotConverged(TrmstError):
    pass


class SingularA(TrmstError):
    pass


class EmptyGrid(TrmstError):
    pass


class DimensionMismatch(TrmstError, ValueError):
    pass


class NoUsablePairs(TrmstError):
    pass


class AllCensored(TrmstError):
    pass


class DegenerateSplit(TrmstError):
    pass


class CalibrationFailed(TrmstError):
    pass


class StudyUnstable(TrmstError):
    pass


class ModelKindMismatch(TrmstError):
    pass


class ConfigError(TrmstError, ValueError):
    pass
