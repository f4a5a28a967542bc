"""Exact simulation and convergence checks for a peripatric metapopulation.

One main population of size ``N`` is surrounded by a fluctuating number of
colonies of size ``eps * N``. The package simulates the colony-count process,
the backward ancestral chain of a sample, a small individual-based forward
model, and the two limiting coalescents, and provides a harness that measures
convergence toward the limits.
"""

from peripatric.errors import (
    DegenerateGeneratorError,
    EventCapExceeded,
    InvalidStateError,
    ParameterError,
)
from peripatric.colony import ModelParams

__version__ = "0.1.0"

__all__ = [
    "DegenerateGeneratorError",
    "EventCapExceeded",
    "InvalidStateError",
    "ModelParams",
    "ParameterError",
    "__version__",
]
