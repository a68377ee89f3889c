"""Exception hierarchy.

Three families map onto CLI exit codes: ``DataError`` (3), ``NumericError`` (4)
and ``ConfigError`` (2, usage).
"""


class DivtsError(Exception):
    pass


class ConfigError(DivtsError):
    pass


class DataError(DivtsError):
    pass


class NumericError(DivtsError):
    pass


# data
class LengthTooShort(DataError):
    pass


class LabelSpanConflict(DataError):
    pass


class NonFiniteInput(DataError):
    pass


class EmptySplit(DataError):
    pass


class TooFewIDClasses(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionMismatch(DataError):
    pass


# synthgen / config
class InvalidConfig(ConfigError):
    pass


class MissingPlantedLabels(DataError):
    pass


# nn / training
class ShapeMismatch(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class DegenerateWeights(NumericError):
    pass


# detect
class SingularCovariance(NumericError):
    pass


class MissingClass(DataError):
    pass


class MissingStats(DataError):
    pass


class MissingCheckpoint(DataError):
    pass


# eval
class LengthMismatch(DataError):
    pass


class OneClassOnly(DataError):
    pass


class NoPositives(DataError):
    pass


class TooFewSamples(DataError):
    pass


class SchemaMismatch(DataError):
    pass
