"""Error types.

Every error carries a stable, machine-readable ``code`` (the class name) so the
command line can report it as a single token.
"""


class MVALError(ValueError):
    """Base class for all domain errors raised by this package."""

    @property
    def code(self) -> str:
        return type(self).__name__


class NegativeEntry(MVALError):
    pass


class RowSumOutOfTolerance(MVALError):
    def __init__(self, row: int, deviation: float):
        self.row = row
        self.deviation = deviation
        super().__init__(f"row {row} sums to 1 {deviation:+.3e}")


class ShapeMismatch(MVALError):
    pass


class InvalidEnvironment(MVALError):
    pass


class InvalidMixProfile(MVALError):
    pass


class ZeroPropensity(MVALError):
    pass


class ZeroBalancedPropensity(MVALError):
    pass


class CountMismatch(MVALError):
    pass


class InfiniteVariance(MVALError):
    pass


class NegativeVariance(MVALError):
    pass


class TooFewValues(MVALError):
    pass


class TooLarge(MVALError):
    pass


class DegenerateWeights(MVALError):
    pass


class ZeroAlpha(MVALError):
    pass


class TooManyActions(MVALError):
    pass


class EmptyClass(MVALError):
    pass


class InfeasibleClass(MVALError):
    pass


class InfiniteBound(MVALError):
    pass


class InfiniteObjective(MVALError):
    pass


class DivergedObjective(MVALError):
    pass


class DimMismatch(MVALError):
    pass


class RankOutOfRange(MVALError):
    pass


class NotUniformSource(MVALError):
    pass
