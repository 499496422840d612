"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
0 (ok), 2 (config), 3 (data) and 4 (numeric) without string matching.
"""


class PerfMAEError(Exception):
    exit_code = 1


class ConfigError(PerfMAEError):
    exit_code = 2


class DataError(PerfMAEError):
    exit_code = 3


class NumericError(PerfMAEError):
    exit_code = 4


# volume I/O
class BadMagicError(DataError):
    pass


class UnsupportedDatatypeError(DataError):
    pass


class DimensionalityError(DataError):
    pass


class NonFiniteDataError(DataError):
    pass


class PayloadLengthError(DataError):
    pass


class HeaderError(DataError):
    pass


class UnitError(DataError):
    pass


class EmptyForegroundError(DataError):
    pass


class ShapeError(DataError):
    pass


class LesionOutsideGridError(DataError):
    pass


# masking / loss
class MaskRatioError(ConfigError):
    pass


class UndefinedLossError(NumericError):
    pass


class NumericOverflowError(NumericError):
    def __init__(self, message, block_index=None):
        super().__init__(message)
        self.block_index = block_index


class NonFiniteGradientError(NumericError):
    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


# training / checkpoints
class ScheduleRangeError(ConfigError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class FrozenWeightMutationError(PerfMAEError):
    """Raised when fine-tuning touched a tensor that must stay frozen."""


# evaluation
class StratificationError(DataError):
    pass


class UndefinedMetricError(NumericError):
    pass
