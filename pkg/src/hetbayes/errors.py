"""Exception hierarchy and warning categories.

Exit-code mapping used by the CLI: usage errors -> 1, DataError -> 2,
NumericalError -> 3.
"""


class HetbayesError(Exception):
    """Base class for all errors raised by this package."""


class DataError(HetbayesError):
    """Invalid or inconsistent input data."""


class NumericalError(HetbayesError):
    """A numerical routine failed to produce a usable result."""


class TooFewObservations(DataError):
    """A unit has too few observations for the sufficient-statistic reduction."""


class DegenerateVariance(DataError):
    """All observations of a unit are identical; the sample variance is zero."""


class EmptyData(DataError):
    """An operation received an empty dataset."""


class UnknownUnit(DataError):
    """A referenced unit id is not present in the dataset."""


class LengthMismatch(DataError):
    """Paired sequences have different lengths."""


class ZeroOracleLoss(DataError):
    """Relative regret is undefined because the oracle loss is zero."""


class InfeasibleCorrelation(DataError):
    """The target correlation is outside the attainable range of the copula."""


class RankDeficient(DataError):
    """The covariate design is rank deficient after within-unit demeaning."""

    def __init__(self, columns, message=None):
        self.columns = tuple(columns)
        super().__init__(message or f"rank-deficient covariate columns: {', '.join(self.columns)}")


class InsufficientWithinVariation(DataError):
    """A unit lacks the repeated records needed for within-unit demeaning."""


class BinTooSmall(DataError):
    """A class-size bin holds fewer units than the configured minimum."""

    def __init__(self, bin_label, count, minimum):
        self.bin_label = bin_label
        self.count = count
        self.minimum = minimum
        super().__init__(f"bin {bin_label!r} has {count} units, below minimum {minimum}")


class NumericalFailure(NumericalError):
    """A fit produced NaN or otherwise signalled pathological inputs."""


class QuadratureUnderflow(NumericalError):
    """The normalizing sum of a posterior quadrature underflowed even in log space."""


class TruncationDominates(UserWarning):
    """The density floor exceeded the mixture density at an evaluation point.

    The affected estimates are deliberately shrunk toward zero rather than
    rescaled, so downstream consumers should treat them as stabilized values.
    """
