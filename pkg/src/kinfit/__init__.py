"""Pixel-wise compartmental parametric imaging for dynamic PET."""

__version__ = "0.1.0"

from .errors import (
    DomainError,
    FitError,
    FormatError,
    InvalidArgument,
    KinfitError,
    SegmentationError,
    SingularSystemError,
)
from .identifiability import *  # noqa: F401,F403
from .inversion import *  # noqa: F401,F403
from .kinetics import *  # noqa: F401,F403
from .preprocess import *  # noqa: F401,F403
from .simulate import *  # noqa: F401,F403
from .stackio import *  # noqa: F401,F403
