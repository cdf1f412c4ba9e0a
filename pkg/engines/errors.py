"""Exceptions raised by the sensitivity engines."""

from typing import Optional


class SensitivityError(Exception):
    """Root of every error raised by this package."""


class InvalidParameter(SensitivityError, ValueError):
    """A precondition on a parameter or configuration value does not hold."""


class NonFiniteState(SensitivityError):
    """A simulated path produced a NaN or infinite component."""

    def __init__(self, t: float, path_index: Optional[int] = None):
        self.t = t
        self.path_index = path_index
        where = f" on path {path_index}" if path_index is not None else ""
        super().__init__(f"non-finite state at t={t:.6g}{where}")


class UnsupportedKind(SensitivityError):
    """The requested estimator kind is not available for this operation."""


class MaxLevelsExceeded(SensitivityError):
    """The MLMC bias test still fails at the maximum number of levels."""

    def __init__(self, levels: int):
        self.levels = levels
        super().__init__(f"MLMC bias test failed at max_levels={levels}")


class DegenerateEnvelope(SensitivityError):
    """The moving max/min envelope hit zero, so its logarithm is undefined."""

    def __init__(self, t: float):
        self.t = t
        super().__init__(f"envelope is zero at t={t:.6g}; increase the number of paths")


class BlowupLimitExceeded(SensitivityError):
    """Too many paths blew up in a Monte Carlo run."""

    def __init__(self, blowups: int, n: int):
        self.blowups = blowups
        self.n = n
        super().__init__(f"{blowups} of {n} paths produced non-finite values")
