"""Langevin dynamics with velocity-orthogonal noise: Monte-Carlo ensembles,
characteristic-function spectra, and statistical cross-checks."""

from .core import (
    Constant,
    General,
    ModelParams,
    RatioLocked,
    SpeedLaw,
    equilibrium_speed_sq,
    memory_kernel_f,
    ortho_cross_noise,
    ortho_project,
    piecewise_linear,
    speed_squared,
)
from .errors import (
    ConfigError,
    GridTooCoarse,
    NotApplicable,
    OrthoLangevinError,
    QuadratureFailure,
    SparseHistogram,
    StepSizeFailure,
    TimeNotSampled,
    ZeroVelocity,
)
from .rng import RngLineage, wiener_increment
from .sde import Ensemble, IntegratorScheme, State, simulate_ensemble
from .spectral import (
    RegimeParams,
    SpectralGrid,
    density_from_modes,
    diffusion_kernel,
    mode_ode_solve,
    wave_solution,
)

__all__ = [
    "Constant",
    "General",
    "ModelParams",
    "RatioLocked",
    "SpeedLaw",
    "equilibrium_speed_sq",
    "memory_kernel_f",
    "ortho_cross_noise",
    "ortho_project",
    "piecewise_linear",
    "speed_squared",
    "ConfigError",
    "GridTooCoarse",
    "NotApplicable",
    "OrthoLangevinError",
    "QuadratureFailure",
    "SparseHistogram",
    "StepSizeFailure",
    "TimeNotSampled",
    "ZeroVelocity",
    "RegimeParams",
    "SpectralGrid",
    "density_from_modes",
    "diffusion_kernel",
    "mode_ode_solve",
    "wave_solution",
    "RngLineage",
    "wiener_increment",
    "Ensemble",
    "IntegratorScheme",
    "State",
    "simulate_ensemble",
]

__version__ = "0.1.0"
