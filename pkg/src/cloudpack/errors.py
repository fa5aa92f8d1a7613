"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration (dataset kind, method name, ...)."""


class TraceFormatError(ValueError):
    """A demand trace file could not be parsed."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition of an operation."""


class SolverError(RuntimeError):
    """An optimization kernel failed (infeasible oracle, singular system, ...)."""
