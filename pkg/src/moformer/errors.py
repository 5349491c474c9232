"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 for usage/config problems, 2 for bad data, 3 for numeric failure.
"""


class MoformerError(Exception):
    exit_code = 1


class ConfigError(MoformerError):
    exit_code = 1


class DataError(MoformerError):
    exit_code = 2


class NumericError(MoformerError):
    exit_code = 3


class MalformedMofId(DataError):
    pass


class UntokenizableCharacter(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class MalformedCif(DataError):
    pass


class TooFewRecords(DataError):
    pass


class ModalityMismatch(DataError):
    pass


class TokenIdOutOfRange(DataError):
    pass


class ShapeMismatch(MoformerError, ValueError):
    pass


class NotScalar(MoformerError, ValueError):
    pass


class OddDimension(ConfigError, ValueError):
    pass


class AllMasked(NumericError):
    pass


class DegenerateColumn(NumericError):
    pass


class NonFiniteValue(NumericError):
    pass


class NanLoss(NumericError):
    pass


class CheckpointError(DataError):
    pass
