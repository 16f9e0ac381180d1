"""Domain types, orthogonality primitives and closed-form scalar laws.

The velocity equation is the Ito SDE

    dv = -a(t) v dt + (v x H) dt + b(t)/|v| (v x dw)

whose speed modulus is non-random:

    d|v|^2/dt = -2 a(t) |v|^2 + 2 b(t)^2.

The ``+2 b^2`` term is the Ito correction of the cross-product noise
(``|v x dw|^2 = 2 |v|^2 dt``); it is what makes ``b^2/a`` an attracting
equilibrium of the speed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy import integrate

from .errors import NotApplicable, QuadratureFailure, ZeroVelocity

__all__ = [
    "Vec3",
    "vec3",
    "Constant",
    "RatioLocked",
    "General",
    "CoefficientProfile",
    "piecewise_linear",
    "ModelParams",
    "SpeedLaw",
    "ortho_cross_noise",
    "ortho_project",
    "integrated_a",
    "speed_squared",
    "speed_squared_on_grid",
    "memory_kernel_f",
    "memory_exponent_rate",
    "equilibrium_speed_sq",
    "QUAD_EPSABS",
    "QUAD_EPSREL",
    "profile_to_dict",
    "profile_from_dict",
    "params_to_dict",
    "params_from_dict",
]

QUAD_EPSABS = 1e-12
QUAD_EPSREL = 1e-10
_QUAD_LIMIT = 200

Vec3 = np.ndarray


def vec3(x) -> Vec3:
    """Validate and return a float64 array of shape (3,)."""
    arr = np.array(x, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"expected 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector components must be finite")
    return arr


# ---------------------------------------------------------------------------
# Coefficient profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a > 0):
            raise ValueError("a must be finite and > 0")
        if not (math.isfinite(self.b) and self.b >= 0):
            raise ValueError("b must be finite and >= 0")

    def a_at(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.a) if np.ndim(t) else float(self.a)

    def b_at(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.b) if np.ndim(t) else float(self.b)


@dataclass(frozen=True)
class RatioLocked:
    """``b(t) = sqrt(v_eq_sq * a(t))`` so that ``b^2/a`` never changes."""

    a_fn: Callable
    v_eq_sq: float

    def __post_init__(self):
        if not (math.isfinite(self.v_eq_sq) and self.v_eq_sq > 0):
            raise ValueError("v_eq_sq must be finite and > 0")

    def a_at(self, t):
        return self.a_fn(t)

    def b_at(self, t):
        return np.sqrt(self.v_eq_sq * np.asarray(self.a_fn(t), dtype=float)) if np.ndim(t) \
            else math.sqrt(self.v_eq_sq * float(self.a_fn(t)))


@dataclass(frozen=True)
class General:
    a_fn: Callable
    b_fn: Callable

    def a_at(self, t):
        return self.a_fn(t)

    def b_at(self, t):
        return self.b_fn(t)


CoefficientProfile = Union[Constant, RatioLocked, General]


@dataclass(frozen=True)
class _PiecewiseLinear:
    knots: tuple
    values: tuple

    def __call__(self, t):
        out = np.interp(t, self.knots, self.values)
        return float(out) if np.ndim(t) == 0 else out

    def integral(self, lo, hi) -> float:
        """Exact ``int_lo^hi`` (the trapezoid rule is exact between knots)."""
        inner = [k for k in self.knots if lo < k < hi]
        xs = np.array([lo, *inner, hi])
        return float(np.trapezoid(np.interp(xs, self.knots, self.values), xs))


def piecewise_linear(knots, values) -> Callable:
    """Continuous, serialisable coefficient function (constant beyond the last knot)."""
    knots = tuple(float(k) for k in knots)
    values = tuple(float(v) for v in values)
    if len(knots) != len(values) or len(knots) < 1:
        raise ValueError("knots and values must be non-empty and of equal length")
    if any(k1 <= k0 for k0, k1 in zip(knots, knots[1:])):
        raise ValueError("knots must be strictly increasing")
    return _PiecewiseLinear(knots, values)


@dataclass(frozen=True)
class ModelParams:
    coeffs: CoefficientProfile
    v0: Vec3
    x0: Vec3 = field(default_factory=lambda: np.zeros(3))
    H: Vec3 = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "v0", vec3(self.v0))
        object.__setattr__(self, "x0", vec3(self.x0))
        object.__setattr__(self, "H", vec3(self.H))
        if not np.linalg.norm(self.v0) > 0:
            raise ZeroVelocity("initial velocity must be non-zero")

    @property
    def speed_law(self) -> "SpeedLaw":
        return SpeedLaw(self.coeffs, float(self.v0 @ self.v0))


@dataclass(frozen=True)
class SpeedLaw:
    profile: CoefficientProfile
    v0_sq: float

    def __post_init__(self):
        if not (math.isfinite(self.v0_sq) and self.v0_sq > 0):
            raise ZeroVelocity("|v0|^2 must be finite and > 0")

    def __call__(self, t):
        return speed_squared(t, self)


# ---------------------------------------------------------------------------
# Orthogonality primitives
# ---------------------------------------------------------------------------


def ortho_cross_noise(v, dw, b):
    """Return ``(b/|v|) (v x dw)``, orthogonal to ``v`` by construction.

    Broadcasts over leading axes of ``v`` and ``dw``.
    """
    v = np.asarray(v, dtype=float)
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(speed == 0):
        raise ZeroVelocity()
    return (b / speed) * np.cross(v, dw)


def ortho_project(v, dxi):
    """Projection operator applied to a perturbation: ``v (v, dxi)/|v|^2 - dxi``.

    Note the sign: the result is the *negative* of the component of ``dxi``
    transverse to ``v``.  Orthogonality to ``v`` is what matters downstream.
    """
    v = np.asarray(v, dtype=float)
    dxi = np.asarray(dxi, dtype=float)
    speed_sq = float(v @ v)
    if speed_sq == 0:
        raise ZeroVelocity()
    return v * (float(v @ dxi) / speed_sq) - dxi


# ---------------------------------------------------------------------------
# Speed modulus and memory kernel
# ---------------------------------------------------------------------------


def _breaks(profile) -> tuple:
    """Knots of piecewise-linear coefficient functions (kinks for quadrature)."""
    fns = [getattr(profile, name, None) for name in ("a_fn", "b_fn")]
    return tuple(sorted({k for f in fns if isinstance(f, _PiecewiseLinear) for k in f.knots}))


def _quad(fn, lo, hi, breaks=()):
    if hi == lo:
        return 0.0
    inner = [k for k in breaks if lo < k < hi]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, abserr, info = integrate.quad(
            fn, lo, hi, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=_QUAD_LIMIT, full_output=1,
            points=inner or None,
        )[:3]
    tol = max(QUAD_EPSABS, QUAD_EPSREL * abs(value))
    if not math.isfinite(value) or abserr > 100 * tol:
        raise QuadratureFailure(
            f"quadrature on [{lo}, {hi}] did not converge (estimate {value}, error {abserr})"
        )
    return value


def integrated_a(t, profile) -> float:
    """``A(t) = int_0^t a``."""
    return _integrate_a(profile, 0.0, t)


def _integrate_a(profile, lo, hi) -> float:
    if isinstance(profile, Constant):
        return profile.a * (hi - lo)
    if isinstance(profile.a_fn, _PiecewiseLinear):
        return profile.a_fn.integral(lo, hi)
    return _quad(lambda s: float(profile.a_at(s)), lo, hi, _breaks(profile))


def speed_squared(t, law: SpeedLaw) -> float:
    """Deterministic ``|v(t)|^2``.

    Constant coefficients use the closed form; the ratio-locked case needs
    only ``int a``; a general profile integrates the variation-of-constants
    formula with nested adaptive quadrature.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    prof = law.profile
    if isinstance(prof, Constant):
        if prof.b == 0:
            return law.v0_sq * math.exp(-2 * prof.a * t)
        eq = prof.b**2 / prof.a
        decay = math.exp(-2 * prof.a * t)
        return eq * (1 - decay) + decay * law.v0_sq
    if isinstance(prof, RatioLocked):
        decay = math.exp(-2 * integrated_a(t, prof))
        return prof.v_eq_sq * (1 - decay) + decay * law.v0_sq
    big_a = integrated_a(t, prof)
    source = _quad(
        lambda th: float(prof.b_at(th)) ** 2 * math.exp(-2 * (big_a - integrated_a(th, prof))),
        0.0,
        t,
        _breaks(prof),
    )
    return 2 * source + math.exp(-2 * big_a) * law.v0_sq


def speed_squared_on_grid(times, law: SpeedLaw) -> np.ndarray:
    """``|v|^2`` on an increasing grid starting at 0.

    General profiles are propagated interval by interval with the exact
    variation-of-constants step, so cost stays linear in the grid length.
    """
    times = np.asarray(times, dtype=float)
    prof = law.profile
    if isinstance(prof, Constant):
        if prof.b == 0:
            return law.v0_sq * np.exp(-2 * prof.a * times)
        eq = prof.b**2 / prof.a
        decay = np.exp(-2 * prof.a * times)
        return eq * (1 - decay) + decay * law.v0_sq
    if times.size == 0:
        return times.copy()
    if times[0] != 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must start at 0 and be strictly increasing")
    out = np.empty_like(times)
    out[0] = law.v0_sq
    big_a = 0.0
    for k in range(1, times.size):
        lo, hi = times[k - 1], times[k]
        step_a = _integrate_a(prof, lo, hi)
        if isinstance(prof, RatioLocked):
            decay = math.exp(-2 * step_a)
            out[k] = prof.v_eq_sq * (1 - decay) + decay * out[k - 1]
        else:
            source = _quad(
                lambda th: float(prof.b_at(th)) ** 2
                * math.exp(-2 * (step_a - _integrate_a(prof, lo, th))),
                lo,
                hi,
                _breaks(prof),
            )
            out[k] = math.exp(-2 * step_a) * out[k - 1] + 2 * source
        big_a += step_a
    return out


def memory_exponent_rate(t, profile, v0_sq) -> float:
    """``2 a(t) + b(t)^2 / |v(t)|^2``; equals ``3a`` on the equilibrium sphere."""
    speed_sq = speed_squared(t, SpeedLaw(profile, v0_sq))
    return 2 * float(profile.a_at(t)) + float(profile.b_at(t)) ** 2 / speed_sq


def memory_kernel_f(t, profile, v0_sq) -> float:
    """Diffusive coefficient ``f(t)`` of the mode equation.

    ``f(t) = int_0^t b^2(tau) exp(-int_tau^t [2a + b^2/|v|^2]) dtau``.  Using
    ``d ln|v|^2 = (-2a + 2 b^2/|v|^2) dt`` the inner exponent reduces to
    ``3 (A(t) - A(tau)) + 0.5 ln(|v(t)|^2 / |v(tau)|^2)``, leaving one
    outer quadrature over known quantities.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return 0.0
    law = SpeedLaw(profile, v0_sq)
    if isinstance(profile, Constant):
        a, b = profile.a, profile.b
        if b == 0:
            return 0.0
        if v0_sq == b**2 / a:
            return b**2 / (3 * a) * (1 - math.exp(-3 * a * t))
    big_a_t = integrated_a(t, profile)
    speed_t = speed_squared(t, law)

    def integrand(tau):
        b_tau = float(profile.b_at(tau))
        if b_tau == 0:
            return 0.0
        decay = math.exp(-3 * (big_a_t - integrated_a(tau, profile)))
        return b_tau**2 * decay * math.sqrt(speed_squared(tau, law) / speed_t)

    return max(_quad(integrand, 0.0, t, _breaks(profile)), 0.0)


def equilibrium_speed_sq(profile) -> float:
    """Radius squared of the attracting speed sphere."""
    if isinstance(profile, Constant):
        return profile.b**2 / profile.a
    if isinstance(profile, RatioLocked):
        return profile.v_eq_sq
    raise NotApplicable("a general profile has no fixed equilibrium speed")


# ---------------------------------------------------------------------------
# Plain-dict (JSON) form
# ---------------------------------------------------------------------------


def _fn_to_dict(fn):
    if isinstance(fn, _PiecewiseLinear):
        return {"knots": list(fn.knots), "values": list(fn.values)}
    raise ValueError("only piecewise_linear coefficient functions can be serialised")


def profile_to_dict(profile) -> dict:
    if isinstance(profile, Constant):
        return {"kind": "constant", "a": profile.a, "b": profile.b}
    if isinstance(profile, RatioLocked):
        return {"kind": "ratio_locked", "a": _fn_to_dict(profile.a_fn), "v_eq_sq": profile.v_eq_sq}
    return {"kind": "general", "a": _fn_to_dict(profile.a_fn), "b": _fn_to_dict(profile.b_fn)}


def profile_from_dict(d) -> CoefficientProfile:
    kind = d["kind"]
    if kind == "constant":
        return Constant(float(d["a"]), float(d["b"]))
    if kind == "ratio_locked":
        return RatioLocked(piecewise_linear(**d["a"]), float(d["v_eq_sq"]))
    if kind == "general":
        return General(piecewise_linear(**d["a"]), piecewise_linear(**d["b"]))
    raise ValueError(f"unknown profile kind {kind!r}")


def params_to_dict(params: ModelParams) -> dict:
    return {
        "coeffs": profile_to_dict(params.coeffs),
        "v0": params.v0.tolist(),
        "x0": params.x0.tolist(),
        "H": params.H.tolist(),
    }


def params_from_dict(d) -> ModelParams:
    return ModelParams(profile_from_dict(d["coeffs"]), d["v0"], d.get("x0", [0, 0, 0]), d.get("H", [0, 0, 0]))
