"""Exception hierarchy shared by every module of the package."""


class OrthoLangevinError(Exception):
    """Base class for all package errors."""


class ZeroVelocity(OrthoLangevinError, ValueError):
    """Velocity modulus reached (or was given as) zero.

    ``trajectory_index`` and ``step_index`` are filled in by the ensemble
    driver when the failure happens inside a batch run.
    """

    def __init__(self, message="velocity modulus is zero", trajectory_index=None, step_index=None):
        if trajectory_index is not None:
            message = f"{message} (trajectory {trajectory_index}, step {step_index})"
        super().__init__(message)
        self.trajectory_index = trajectory_index
        self.step_index = step_index


class QuadratureFailure(OrthoLangevinError, RuntimeError):
    """Adaptive integration did not reach the requested tolerance."""


class NotApplicable(OrthoLangevinError, ValueError):
    """Operation has no meaning for the given coefficient profile."""


class StepSizeFailure(OrthoLangevinError, RuntimeError):
    """Step-halving check of the mode solver failed at the minimum step."""


class GridTooCoarse(OrthoLangevinError, ValueError):
    """Too much spectral weight sits near the Nyquist edge of the grid."""


class TimeNotSampled(OrthoLangevinError, KeyError):
    """Requested time is not one of the ensemble sample times."""


class SparseHistogram(OrthoLangevinError, ValueError):
    """Histogram bins are too sparsely populated for a chi-square test."""


class ConfigError(OrthoLangevinError, ValueError):
    """Experiment configuration failed validation."""
