"""haircap: prior-free multi-view hair capture.

Pipeline stages: per-pixel 2D orientation distributions, volumetric
orientation-field optimization, scalp-rooted strand tracing, and
strand refinement with chained Gaussian splatting — plus a synthetic
capture generator used for end-to-end evaluation.
"""

__version__ = "0.1.0"

from .errors import (
    BehindCameraError,
    ContractViolation,
    DegenerateDirectionError,
    DegenerateStrandError,
    DependencyError,
    DivergenceError,
    EmptyVolumeError,
    HaircapError,
    SpecParseError,
    StallError,
)

__all__ = [
    "__version__",
    "HaircapError",
    "ContractViolation",
    "BehindCameraError",
    "DegenerateDirectionError",
    "DegenerateStrandError",
    "EmptyVolumeError",
    "StallError",
    "DependencyError",
    "SpecParseError",
    "DivergenceError",
]
