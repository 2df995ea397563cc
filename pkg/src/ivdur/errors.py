"""Exception types raised by the ivdur estimation pipeline."""


class IvdurError(Exception):
    """Base class for all package-specific errors."""


class DataFormatError(IvdurError):
    """Malformed input data; carries the offending line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyCell(IvdurError):
    """A required (treatment, instrument) cell has no observations."""

    def __init__(self, z, w):
        self.z = z
        self.w = w
        super().__init__(f"empty cell for treatment={z!r}, instrument={w!r}")


class EmptyInstrumentLevel(IvdurError):
    """An instrument level has zero observations."""

    def __init__(self, w):
        self.w = w
        super().__init__(f"instrument level {w!r} has no observations")


class DegenerateSample(IvdurError):
    """Too little spread in a sample to apply a data-driven rule."""


class InvalidBandwidth(IvdurError):
    """Bandwidth must be strictly positive."""


class TailDominates(IvdurError):
    """Too much exponential mass lies beyond the estimation grid."""


class BootstrapDegeneracy(IvdurError):
    """Resampling kept producing unusable datasets (too many redraws)."""


class TriangularPrecondition(IvdurError):
    """The data do not satisfy the triangular-design requirements."""
