"""Exception types shared across the solver.

Kept in one place so callers can catch them without importing the module
that raised them.
"""


class PiescatError(Exception):
    """Base class for all solver errors."""


# --- mesh ---------------------------------------------------------------

class ParseError(PiescatError):
    """A mesh file could not be parsed in the declared format."""


class TopologyError(PiescatError):
    """Open surface, non-manifold edge, or inconsistent orientation."""


class DegenerateError(PiescatError):
    """Zero-area triangle or duplicate vertices beyond repair."""


class InvalidGeometry(PiescatError):
    """Generator parameters describe an impossible shape."""


class RefinementMismatch(PiescatError):
    """A refined mesh does not belong to the parent it was paired with."""


# --- basis --------------------------------------------------------------

class OutOfSupport(PiescatError):
    """Strict-mode basis evaluation at a point outside the support."""


# --- media / quadrature -------------------------------------------------

class SingularEvaluation(PiescatError):
    """Green's function requested at (numerically) coincident points."""


class DegenerateTriangle(PiescatError):
    """Analytic triangle integral requested on a degenerate triangle."""


class QuadratureFailure(PiescatError):
    """Adaptive refinement exceeded its depth limit."""


# --- operators / system -------------------------------------------------

class AssemblyError(PiescatError):
    """Operator assembly failed (dimension mismatch, bad tags)."""


class DimensionMismatch(PiescatError):
    """Blocks handed to the system assembler do not fit together."""


class MaterialError(PiescatError):
    """Material constants are outside the formulation's domain (e.g. gamma = 0)."""


class SingularMatrix(PiescatError):
    """Direct factorization hit an exactly singular pivot."""


class ResidualTooLarge(PiescatError):
    """Relative residual of the direct solve exceeded the trust threshold."""


# --- post ---------------------------------------------------------------

class PointTooClose(PiescatError):
    """Field evaluation requested too close to the surface."""


# --- mie ----------------------------------------------------------------

class ConvergenceError(PiescatError):
    """A series or recurrence failed to stabilize."""


# --- cli ----------------------------------------------------------------

class ConfigError(PiescatError):
    """Run configuration missing, malformed, or inconsistent."""


class GridMismatch(PiescatError):
    """Two result files do not share the same angle grid."""
