"""Exception types shared across the package."""


class MomshootError(Exception):
    """Base class for all package errors."""


class GeometryMismatchError(MomshootError):
    """Two fields that must share a grid do not."""


class InvalidInputError(MomshootError):
    """Rejected input (non-finite values, bad shapes, bad parameters)."""


class ConvergenceError(MomshootError):
    """Iterative scheme failed to converge; carries the final residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class BlowUpError(MomshootError):
    """Geodesic integration produced non-finite or runaway values."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class DivergenceError(MomshootError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
