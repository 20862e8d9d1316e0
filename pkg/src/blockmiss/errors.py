"""Exception hierarchy.

Three branches map onto the CLI exit codes: configuration problems (exit 2),
data problems (exit 3), and numerical failures (exit 4).
"""


class BlockmissError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(BlockmissError):
    """Invalid run configuration."""

    exit_code = 2


class DataError(BlockmissError):
    """Invalid or insufficient input data."""

    exit_code = 3


class NumericError(BlockmissError):
    """Numerical failure while solving."""

    exit_code = 4


# -- configuration ----------------------------------------------------------

class InvalidConfig(ConfigError):
    pass


class InvalidLevel(ConfigError):
    pass


class InvalidQ(ConfigError):
    pass


# -- data / contract --------------------------------------------------------

class EmptyInput(DataError):
    pass


class EmptyMask(DataError):
    pass


class MissingFullPattern(DataError):
    pass


class UnknownPattern(DataError):
    pass


class FullPatternArgument(DataError):
    pass


class MissingModality(DataError):
    pass


class MissingPredictor(DataError):
    pass


class MaskMismatch(DataError):
    pass


class InsufficientData(DataError):
    pass


class InsufficientCompleteRows(DataError):
    pass


class NotMeanTarget(DataError):
    pass


class NoUnlabeledRows(DataError):
    pass


class FoldDegenerate(DataError):
    pass


class PartialBlock(DataError):
    pass


class UnknownColumn(DataError):
    pass


class EmptyFile(DataError):
    pass


# -- numerics ---------------------------------------------------------------

class SingularJacobian(NumericError):
    pass


class NoConvergence(NumericError):
    pass


class SingularA(NumericError):
    pass


class SingularG(NumericError):
    pass


class SingularKKT(NumericError):
    pass


class DegenerateProgram(NumericError):
    pass


class RankDeficient(NumericError):
    pass


class NonGaussianSpec(NumericError):
    pass


class NotPositiveDefinite(NumericError):
    pass


class SimulationFailure(NumericError):
    pass
