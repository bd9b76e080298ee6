"""
Error hierarchy for lorentzfk.

Every error carries the process exit code the CLI reports for it:

- ConfigInvalid (2): bad inputs, rejected before any computation
- GuardExceeded (3): a feasibility guard refused the workload
- NumericalFailure (4): a computed quantity broke a checked bound
- IoFailure (5): artifacts could not be written
"""


class LorentzFKError(Exception):
    """Base class for all lorentzfk errors"""
    exit_code = 1


class ConfigInvalid(LorentzFKError, ValueError):
    exit_code = 2


class GuardExceeded(LorentzFKError):
    exit_code = 3


class NumericalFailure(LorentzFKError, ArithmeticError):
    exit_code = 4


class IoFailure(LorentzFKError, OSError):
    exit_code = 5


# Offspring laws and trees
class NotAProbability(ConfigInvalid):
    pass


class NotCritical(ConfigInvalid):
    pass


class InfiniteVariance(ConfigInvalid):
    pass


class MalformedTree(ConfigInvalid):
    pass


# Triangulations and distances
class NotATriangulation(ConfigInvalid):
    pass


class UnknownVertex(ConfigInvalid, KeyError):
    pass


class EmptyInput(ConfigInvalid):
    pass


class InadmissibleJ(ConfigInvalid):
    pass


# Torus kernels and paths
class NonpositiveBeta(ConfigInvalid):
    pass


class NonpositiveTolerance(ConfigInvalid):
    pass


class BadSliceCount(ConfigInvalid):
    pass


class DimensionMismatch(ConfigInvalid):
    pass


# Energies
class MismatchedPaths(ConfigInvalid):
    pass


class ZeroDistance(ConfigInvalid):
    pass


class OverlappingSupports(ConfigInvalid):
    pass


# Gibbs estimators
class WindowTooLarge(ConfigInvalid):
    pass


class NotEnoughSamples(ConfigInvalid):
    pass


class GridMismatch(ConfigInvalid):
    pass


class TooLarge(GuardExceeded):
    pass


class DegenerateWeights(NumericalFailure):
    pass


class BoundViolation(NumericalFailure):
    pass


class EnergyCacheDrift(NumericalFailure):
    pass


class OracleMismatch(NumericalFailure):
    pass


# Tuned actions
class NonpositiveB(ConfigInvalid):
    pass


class NotEnoughPoints(ConfigInvalid):
    pass
