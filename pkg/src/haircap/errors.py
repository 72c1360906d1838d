"""Exception types shared across the pipeline.

Contract violations map to CLI exit code 2, numerical divergence to 3.
"""


class HaircapError(Exception):
    """Base class for all pipeline errors."""


class ContractViolation(HaircapError):
    """An operation was called with inputs violating its preconditions."""


class BehindCameraError(ContractViolation):
    """Point projection requested for a point at or behind the camera center."""


class DegenerateDirectionError(ContractViolation):
    """Direction projection requested for a direction parallel to the optical axis."""


class DegenerateStrandError(ContractViolation):
    """Strand has zero total arc length or too few vertices."""


class EmptyVolumeError(HaircapError):
    """No rays intersect the hair bounding box, or no admissible seed volume."""


class StallError(HaircapError):
    """Strand growth direction collapsed to zero."""


class DependencyError(HaircapError):
    """A pipeline stage was invoked before its upstream artifacts exist."""


class SpecParseError(HaircapError):
    """A groom spec or config file could not be parsed."""


class DivergenceError(HaircapError):
    """An optimization produced non-finite losses."""
