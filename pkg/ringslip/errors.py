"""
Exception hierarchy for ringslip.

Every error raised on purpose by the package derives from RingslipError so the
CLI can report it cleanly and exit with a nonzero code.
"""


class RingslipError(Exception):
    """Base class for all ringslip errors."""


class MeshStructureError(RingslipError):
    """Connectivity or coordinate data is structurally inconsistent."""


class ConstraintViolation(RingslipError):
    """A constraint of the mesh update method is violated."""


class TwistedElementError(RingslipError):
    """A space-time element changes orientation inside its slab."""

    def __init__(self, element: int, step: int | None = None):
        self.element = element
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"Element {element} is twisted{where}; node reordering is not supported"
        )


class SingularSystemError(RingslipError):
    """The linear system could not be factorized."""

    def __init__(self, dof: int | None, detail: str = ""):
        self.dof = dof
        msg = "Singular system matrix"
        if dof is not None:
            msg += f": zero pivot at DOF {dof}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConvergenceError(RingslipError):
    """Newton iterations diverged or hit the iteration limit."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class MeshFileError(RingslipError):
    """Malformed mesh file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(RingslipError):
    """Invalid case configuration."""
