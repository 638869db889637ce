"""Exception types shared across the package."""


class MeshtuneError(Exception):
    """Base class for all meshtune errors."""


class InputError(MeshtuneError):
    """Invalid input data: bad mesh, bad file, bad arguments (CLI exit 2)."""


class OptimizationError(MeshtuneError):
    """Optimization aborted: non-finite loss/gradient or unrecoverable
    degenerate elements (CLI exit 3)."""
