"""
Error types shared by the SOH toolkit.

Data problems map to CLI exit code 2, numerical problems to 3 and usage
problems to 1.
"""


class SohError(Exception):
    exit_code = 2


class DataError(SohError, ValueError):
    """Input data violates a precondition."""
    exit_code = 2


class NumericalError(SohError, ArithmeticError):
    """A solver could not produce a usable answer."""
    exit_code = 3


class UsageError(SohError):
    exit_code = 1


# ingest

class MalformedRow(DataError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class NonMonotonicTime(DataError):
    pass


class EmptyFile(DataError):
    pass


class DuplicateCycle(DataError):
    pass


class NoCvPhase(DataError):
    pass


class DegenerateCv(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class NegativeCurrent(DataError):
    pass


class InvalidKernel(DataError):
    pass


class NonPositiveNominal(DataError):
    pass


class InvalidDischarge(DataError):
    pass


class ImplausibleCapacity(DataError):
    pass


# features

class TooShort(DataError):
    pass


class ZeroVariance(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ConstantLabel(DataError):
    pass


# sindy

class ShapeMismatch(DataError):
    pass


class TooFewSnapshots(DataError):
    pass


class NoActiveTerms(NumericalError):
    """Thresholding removed every library column."""


class NumericalFailure(NumericalError):
    pass


# pipeline / files

class InsufficientData(DataError):
    pass


class NoFeaturesSelected(DataError):
    pass


class EmptyInput(DataError):
    pass


class InvalidConfig(DataError):
    pass


class IoFailure(SohError):
    exit_code = 2


class SchemaVersionMismatch(DataError):
    pass
