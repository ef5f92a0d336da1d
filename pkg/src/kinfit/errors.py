"""Exception types shared across the package."""

import numpy as np


class KinfitError(Exception):
    """Base class for all package errors."""


class InvalidArgument(KinfitError, ValueError):
    pass


class DomainError(KinfitError, ValueError):
    """An input function or time grid cannot cover the requested range."""


class SingularSystemError(KinfitError, np.linalg.LinAlgError):
    pass


class FitError(KinfitError, RuntimeError):
    """Failure inside the pixel-wise Gauss-Newton loop.

    Carries the iterate at which the failure happened so callers can log it.
    """

    def __init__(self, message, iteration=None, k=None):
        super().__init__(message)
        self.iteration = iteration
        self.k = None if k is None else np.asarray(k, dtype=float).copy()

    def __str__(self):
        base = super().__str__()
        if self.iteration is None:
            return base
        return f"{base} (iteration {self.iteration}, k={np.array2string(self.k, precision=6)})"


class SegmentationError(KinfitError, ValueError):
    pass


class FormatError(KinfitError, ValueError):
    """Malformed stack, phantom or input-function file."""
