"""Exception hierarchy.

Numerical failures (``NumericalError`` subclasses) map to exit code 2 in the
command-line tool; everything deriving from ``ValidationError`` maps to 1.
"""


class HomlabError(Exception):
    """Base class for all package errors."""


class ValidationError(HomlabError, ValueError):
    """Bad user input: inconsistent parameters, missing files, malformed config."""


class NumericalError(HomlabError):
    """A computation could not deliver a result within its contract."""


class ClippedSpectrumError(NumericalError):
    def __init__(self, clipped_mass, tolerance):
        super().__init__(
            f"periodic embedding clipped {clipped_mass:.3e} of the spectral mass "
            f"(tolerance {tolerance:.1e}); enlarge the torus"
        )
        self.clipped_mass = clipped_mass
        self.tolerance = tolerance


class AdmissibilityError(NumericalError):
    """A coefficient field violates the boundedness or coercivity bound."""


class GridMismatchError(ValidationError):
    pass


class NoConvergenceError(NumericalError):
    def __init__(self, report):
        super().__init__(
            f"Krylov solve stalled after {report.iterations} iterations "
            f"(relative residual {report.residual:.3e})"
        )
        self.report = report


class SingularMatrixError(NumericalError):
    pass


class ResolutionError(ValidationError):
    pass


class MissingCenteringError(ValidationError):
    pass


class InsufficientSamplesError(ValidationError):
    pass


class DegenerateFitError(NumericalError):
    pass


class MissingReportError(ValidationError):
    pass


class SweepAbortedError(NumericalError):
    """Too many samples of an ensemble sweep failed."""

    def __init__(self, failures, n_samples):
        super().__init__(
            f"{len(failures)} of {n_samples} samples failed (limit 1%); first: {failures[0][1]}"
        )
        self.failures = failures
