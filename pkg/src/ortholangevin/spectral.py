"""Characteristic-function layer.

Per wavevector ``lam`` the conditional characteristic function
``Psi(t) = E[exp(i (lam, x(t))) | x0, v0]`` is approximated by the linear
second-order mode equation

    Psi'' + a(t) Psi' = -(|lam|^2 f(t) + (lam, v0)^2) Psi,
    Psi(0) = exp(i (lam, x0)),   Psi'(0) = i (lam, v0) Psi(0),

with the memory kernel ``f`` of :func:`ortholangevin.core.memory_kernel_f`.
Densities follow by multiplying the transform of an initial profile by the
point-source mode solution and inverting.  Transforms use the
characteristic-function sign, ``rho_hat(lam) = int rho(x) exp(+i (lam, x)) dx``.

Also here: the anisotropic Gaussian kernel of the strong-damping limit, the
rigid-translation solution of the weak-damping limit, and the spectral
right-hand side of the velocity-averaged equation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Constant, ModelParams, vec3
from .errors import GridTooCoarse, StepSizeFailure

__all__ = [
    "ModeState",
    "SpectralGrid",
    "RegimeParams",
    "DensityField",
    "solve_modes",
    "mode_ode_solve",
    "density_from_modes",
    "densities_from_modes",
    "gaussian_density",
    "diffusion_kernel",
    "wave_solution",
    "averaged_laplacian_coefficient",
    "averaged_density_equation_rhs",
    "write_density_csv",
    "write_density_binary",
    "read_density_binary",
    "read_density_csv",
    "DENSITY_MAGIC",
    "DENSITY_VERSION",
    "RICHARDSON_TOL",
]

RICHARDSON_TOL = 1e-8
_MAX_STEPS = 2**21
_EDGE_FRACTION = 0.8
_EDGE_MASS_LIMIT = 1e-3


@dataclass(frozen=True)
class ModeState:
    lam: np.ndarray
    t: float
    psi: complex
    dpsi_dt: complex


# ---------------------------------------------------------------------------
# Mode equation
# ---------------------------------------------------------------------------


def _rk4_modes(params: ModelParams, k_sq, k_v, psi0, dpsi0, t_grid, h_target):
    """Fixed-step RK4 on (|v|^2, f, Psi, Psi') hitting every grid time exactly."""
    prof = params.coeffs
    s = float(params.v0 @ params.v0)
    f = 0.0
    psi = psi0.astype(complex)
    dpsi = dpsi0.astype(complex)
    k_v_sq = k_v * k_v
    out_psi = np.empty((len(t_grid),) + psi.shape, dtype=complex)
    out_dpsi = np.empty_like(out_psi)
    out_psi[0], out_dpsi[0] = psi, dpsi
    n_total = 0

    def rates(t, s_, f_):
        a = float(prof.a_at(t))
        b2 = float(prof.b_at(t)) ** 2
        return a, b2, -2 * a * s_ + 2 * b2, b2 - (2 * a + b2 / s_) * f_

    for i in range(1, len(t_grid)):
        t0, t1 = float(t_grid[i - 1]), float(t_grid[i])
        m = max(1, math.ceil((t1 - t0) / h_target - 1e-9))
        n_total += m
        if n_total > _MAX_STEPS:
            raise StepSizeFailure("mode solver exceeded its step budget")
        h = (t1 - t0) / m
        for j in range(m):
            t = t0 + j * h
            a1, _, ds1, df1 = rates(t, s, f)
            c1 = k_sq * f + k_v_sq
            kp1 = dpsi
            kd1 = -a1 * dpsi - c1 * psi

            s2, f2 = s + 0.5 * h * ds1, f + 0.5 * h * df1
            a2, _, ds2, df2 = rates(t + 0.5 * h, s2, f2)
            c2 = k_sq * f2 + k_v_sq
            p2 = psi + 0.5 * h * kp1
            d2 = dpsi + 0.5 * h * kd1
            kp2 = d2
            kd2 = -a2 * d2 - c2 * p2

            s3, f3 = s + 0.5 * h * ds2, f + 0.5 * h * df2
            _, _, ds3, df3 = rates(t + 0.5 * h, s3, f3)
            c3 = k_sq * f3 + k_v_sq
            p3 = psi + 0.5 * h * kp2
            d3 = dpsi + 0.5 * h * kd2
            kp3 = d3
            kd3 = -a2 * d3 - c3 * p3

            s4, f4 = s + h * ds3, f + h * df3
            a4, _, ds4, df4 = rates(t + h, s4, f4)
            c4 = k_sq * f4 + k_v_sq
            p4 = psi + h * kp3
            d4 = dpsi + h * kd3
            kp4 = d4
            kd4 = -a4 * d4 - c4 * p4

            psi = psi + (h / 6) * (kp1 + 2 * kp2 + 2 * kp3 + kp4)
            dpsi = dpsi + (h / 6) * (kd1 + 2 * kd2 + 2 * kd3 + kd4)
            s = s + (h / 6) * (ds1 + 2 * ds2 + 2 * ds3 + ds4)
            f = f + (h / 6) * (df1 + 2 * df2 + 2 * df3 + df4)
        out_psi[i], out_dpsi[i] = psi, dpsi
    return out_psi, out_dpsi


def _initial_step(params, k_sq, k_v, t_grid):
    prof = params.coeffs
    probe = np.linspace(0.0, float(t_grid[-1]), 33)
    a_max = max(float(prof.a_at(t)) for t in probe)
    b2_max = max(float(prof.b_at(t)) ** 2 for t in probe)
    a_min = min(float(prof.a_at(t)) for t in probe)
    horizon = float(t_grid[-1])
    f_bound = b2_max * (min(horizon, 1 / (2 * a_min)) if a_min > 0 else horizon)
    omega = math.sqrt(float(np.max(k_sq, initial=0.0)) * f_bound + float(np.max(k_v * k_v, initial=0.0)))
    rate = max(a_max, omega, 1e-12)
    return min(float(t_grid[-1]) / 16, 0.25 / rate)


def solve_modes(lams, params: ModelParams, t_grid, tol=RICHARDSON_TOL, x0=None):
    """Vectorised mode solve.

    Returns ``(psi, dpsi)`` arrays of shape ``(len(t_grid),) + lams.shape[:-1]``.
    The step is halved until halving again changes Psi by less than ``tol``
    at every grid time; the finer solution is returned.
    """
    lams = np.asarray(lams, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0 or t_grid[0] != 0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must start at 0 and be strictly increasing")
    x0 = params.x0 if x0 is None else vec3(x0)
    shape = lams.shape[:-1]
    flat = lams.reshape(-1, 3)
    k_sq = np.einsum("ij,ij->i", flat, flat)
    k_v = flat @ params.v0
    phase = np.exp(1j * (flat @ x0))
    # the solution is Psi(0) * u(t), and u depends on lam only through
    # (|lam|^2, (lam, v0)); flipping the sign of (lam, v0) conjugates u
    keys, inverse = np.unique(np.column_stack([k_sq, np.abs(k_v)]), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    u, du = _solve_unit_modes(params, keys[:, 0], keys[:, 1], t_grid, tol)
    u, du = u[:, inverse], du[:, inverse]
    flip = k_v < 0
    u[:, flip] = np.conj(u[:, flip])
    du[:, flip] = np.conj(du[:, flip])
    psi = (u * phase).reshape((len(t_grid),) + shape)
    dpsi = (du * phase).reshape((len(t_grid),) + shape)
    return psi, dpsi


def _solve_unit_modes(params, k_sq, k_v, t_grid, tol):
    psi0 = np.ones(k_sq.shape, dtype=complex)
    dpsi0 = 1j * k_v * psi0
    if t_grid.size == 1:
        return psi0[None].copy(), dpsi0[None].copy()

    h = _initial_step(params, k_sq, k_v, t_grid)
    coarse = _rk4_modes(params, k_sq, k_v, psi0, dpsi0, t_grid, h)
    while True:
        h /= 2
        fine = _rk4_modes(params, k_sq, k_v, psi0, dpsi0, t_grid, h)
        if np.max(np.abs(fine[0] - coarse[0]), initial=0.0) < tol:
            return fine
        if h < 1e-9 * float(t_grid[-1]):
            raise StepSizeFailure("step-halving check failed at the minimum step")
        coarse = fine


def mode_ode_solve(lam, params: ModelParams, t_grid) -> list[ModeState]:
    """Mode solution for one wavevector at every time in ``t_grid``."""
    lam = vec3(lam)
    psi, dpsi = solve_modes(lam[None, :], params, t_grid)
    return [
        ModeState(lam.copy(), float(t), complex(psi[i, 0]), complex(dpsi[i, 0]))
        for i, t in enumerate(np.asarray(t_grid, dtype=float))
    ]


# ---------------------------------------------------------------------------
# Grids and densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralGrid:
    """Periodic cube of side ``x_extent`` with ``n_per_axis`` points per axis.

    Sample points are ``-x_extent/2 + j dx``; each is the centre of a cell of
    side ``dx``.  Wavevectors are ``2 pi k / x_extent``, ``|k| <= n/2``, so the
    largest one is ``lambda_max = pi n / x_extent``.
    """

    n_per_axis: int
    lambda_max: float
    x_extent: float

    def __post_init__(self):
        n = self.n_per_axis
        if not isinstance(n, (int, np.integer)) or n < 2 or n & (n - 1):
            raise ValueError("n_per_axis must be a power of two >= 2")
        if not (self.x_extent > 0 and self.lambda_max > 0):
            raise ValueError("x_extent and lambda_max must be positive")
        if not math.isclose(self.lambda_max * self.x_extent, math.pi * n, rel_tol=1e-12):
            raise ValueError("lambda_max * x_extent must equal pi * n_per_axis")

    @classmethod
    def from_extent(cls, n_per_axis, x_extent) -> "SpectralGrid":
        return cls(int(n_per_axis), math.pi * n_per_axis / x_extent, float(x_extent))

    @property
    def dx(self) -> float:
        return self.x_extent / self.n_per_axis

    @property
    def cell_volume(self) -> float:
        return self.dx**3

    @property
    def axis(self) -> np.ndarray:
        return -0.5 * self.x_extent + self.dx * np.arange(self.n_per_axis)

    @property
    def lambda_axis(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.n_per_axis, d=self.dx)

    def points(self) -> np.ndarray:
        """Sample points, shape ``(n, n, n, 3)``; axis 0 runs along x1."""
        ax = self.axis
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)

    def wavevectors(self) -> np.ndarray:
        ax = self.lambda_axis
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(points)`` on the grid."""
        return np.asarray(fn(self.points()), dtype=float)

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell_volume)

    def to_dict(self) -> dict:
        return {"n_per_axis": self.n_per_axis, "x_extent": self.x_extent}


@dataclass
class DensityField:
    grid: SpectralGrid
    t: float
    values: np.ndarray
    imag_residue: float
    negative_mass: float
    edge_weight: float

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.values)


def _hermitian_symmetrize(psi):
    # Nyquist planes have no distinct partner; averaging with the reflected
    # conjugate makes the inverse transform real (a no-op elsewhere)
    reflected = np.roll(psi[::-1, ::-1, ::-1], 1, axis=(0, 1, 2))
    return 0.5 * (psi + np.conj(reflected))


def densities_from_modes(grid: SpectralGrid, params: ModelParams, times, initial_density,
                         check_edge=True) -> list[DensityField]:
    """Evolve a sampled initial density to each time in ``times``.

    The initial profile carries the starting position, so modes are solved
    for a point source at the origin (``Psi(0) = 1``).
    """
    rho0 = np.asarray(initial_density, dtype=float)
    n = grid.n_per_axis
    if rho0.shape != (n, n, n):
        raise ValueError(f"initial density must have shape {(n, n, n)}")
    if np.any(rho0 < 0):
        raise ValueError("initial density must be non-negative")
    if not math.isclose(grid.integrate(rho0), 1.0, rel_tol=1e-6):
        raise ValueError("initial density must integrate to 1 on the grid")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be non-negative and strictly increasing")
    t_grid = times if times[0] == 0 else np.concatenate([[0.0], times])
    psi_all, _ = solve_modes(grid.wavevectors(), params, t_grid, x0=np.zeros(3))
    psi_all = psi_all[-times.size:]

    spec0 = np.fft.ifftn(rho0)
    lam_norm = np.sqrt(np.einsum("...i,...i->...", grid.wavevectors(), grid.wavevectors()))
    edge = lam_norm > _EDGE_FRACTION * grid.lambda_max
    out = []
    for t, psi in zip(times, psi_all):
        spec = spec0 * _hermitian_symmetrize(psi)
        power = np.abs(spec) ** 2
        edge_weight = float(power[edge].sum() / power.sum())
        if check_edge and edge_weight > _EDGE_MASS_LIMIT:
            raise GridTooCoarse(
                f"{edge_weight:.2%} of spectral weight beyond {_EDGE_FRACTION} * lambda_max at t={t}"
            )
        full = np.fft.fftn(spec)
        values = full.real
        peak = float(np.max(np.abs(values)))
        out.append(DensityField(
            grid=grid,
            t=float(t),
            values=values,
            imag_residue=float(np.max(np.abs(full.imag)) / peak) if peak > 0 else 0.0,
            negative_mass=float(-values[values < 0].sum() * grid.cell_volume),
            edge_weight=edge_weight,
        ))
    return out


def density_from_modes(grid: SpectralGrid, params: ModelParams, t, initial_density,
                       check_edge=True) -> DensityField:
    return densities_from_modes(grid, params, [t], initial_density, check_edge)[0]


def gaussian_density(points, mean, cov) -> np.ndarray:
    """Multivariate normal pdf evaluated at ``points`` (shape ``(..., 3)``)."""
    cov = np.asarray(cov, dtype=float)
    diff = np.asarray(points, dtype=float) - np.asarray(mean, dtype=float)
    inv = np.linalg.inv(cov)
    quad = np.einsum("...i,ij,...j->...", diff, inv, diff)
    norm = (2 * np.pi) ** 1.5 * math.sqrt(np.linalg.det(cov))
    return np.exp(-0.5 * quad) / norm


# ---------------------------------------------------------------------------
# Limit regimes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegimeParams:
    """Small-parameter scalings of constant coefficients.

    * diffusion: ``a = base_a / eps``, ``b = base_b / eps``
    * wave: ``a = eps * base_a``, ``b = base_b * sqrt(eps)``

    Both keep the equilibrium speed finite: ``b^2/a = base_b^2 / (eps base_a)``
    and ``base_b^2 / base_a`` respectively.
    """

    epsilon: float
    base_a: float
    base_b: float

    def __post_init__(self):
        if not self.epsilon > 0 or not self.base_a > 0 or not self.base_b >= 0:
            raise ValueError("need epsilon > 0, base_a > 0, base_b >= 0")

    @property
    def v_tilde_sq(self) -> float:
        return self.base_b**2 / self.base_a

    def diffusion_profile(self) -> Constant:
        return Constant(self.base_a / self.epsilon, self.base_b / self.epsilon)

    def wave_profile(self) -> Constant:
        return Constant(self.epsilon * self.base_a, self.base_b * math.sqrt(self.epsilon))


def _orthonormal_frame(direction):
    u = vec3(direction)
    u = u / np.linalg.norm(u)
    helper = np.eye(3)[np.argmin(np.abs(u))]
    e2 = np.cross(u, helper)
    e2 /= np.linalg.norm(e2)
    return np.stack([u, e2, np.cross(u, e2)])


def diffusion_kernel(t, x, x0, v0_dir, v_eq_sq, a):
    """Anisotropic Gaussian of the strong-damping limit.

    Diffusivity ``2|v|^2/(3a)`` along ``v0_dir`` and ``|v|^2/(3a)`` across
    it, centred at ``x0``; ``x`` may have any leading shape.
    """
    if not (t > 0 and a > 0 and v_eq_sq > 0):
        raise ValueError("need t > 0, a > 0, v_eq_sq > 0")
    d_par = 2 * v_eq_sq / (3 * a)
    d_perp = v_eq_sq / (3 * a)
    frame = _orthonormal_frame(v0_dir)
    rel = np.asarray(x, dtype=float) - vec3(x0)
    local = rel @ frame.T
    expo = local[..., 0] ** 2 / (4 * d_par * t) + (local[..., 1] ** 2 + local[..., 2] ** 2) / (4 * d_perp * t)
    norm = (4 * np.pi * t) ** 1.5 * math.sqrt(d_par) * d_perp
    return np.exp(-expo) / norm


def diffusion_kernel_covariance(t, v0_dir, v_eq_sq, a) -> np.ndarray:
    frame = _orthonormal_frame(v0_dir)
    d = np.diag([2 * v_eq_sq / (3 * a), v_eq_sq / (3 * a), v_eq_sq / (3 * a)])
    return 2 * t * frame.T @ d @ frame


def wave_solution(t, x, initial_density, v0):
    """Initial profile translated rigidly by ``v0 t`` (transport along +v0)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    v0 = vec3(v0)
    if not np.linalg.norm(v0) > 0:
        raise ValueError("v0 must be non-zero")
    return initial_density(np.asarray(x, dtype=float) - v0 * t)


def averaged_laplacian_coefficient(t, regime: RegimeParams) -> float:
    """Coefficient ``c(t)`` of ``lap(rho)`` in the velocity-averaged equation.

    ``c = |v~|^2/3 (1 - exp(-3 a~ t / eps)) + |v~|^2/3``; tends to
    ``2|v~|^2/3`` as ``eps -> 0`` at fixed ``t > 0``.
    """
    third = regime.v_tilde_sq / 3
    return third * -math.expm1(-3 * regime.base_a * t / regime.epsilon) + third


def averaged_density_equation_rhs(t, field, regime: RegimeParams, grid: SpectralGrid,
                                  check_edge=True) -> np.ndarray:
    """Spectral evaluation of ``c(t) lap(field)``."""
    field = np.asarray(field, dtype=float)
    spec = np.fft.ifftn(field)
    lam = grid.wavevectors()
    k_sq = np.einsum("...i,...i->...", lam, lam)
    if check_edge:
        power = np.abs(spec) ** 2
        total = power.sum()
        if total > 0:
            edge_weight = power[np.sqrt(k_sq) > _EDGE_FRACTION * grid.lambda_max].sum() / total
            if edge_weight > _EDGE_MASS_LIMIT:
                raise GridTooCoarse(f"{edge_weight:.2%} of spectral weight near the Nyquist edge")
    coef = averaged_laplacian_coefficient(t, regime)
    return np.fft.fftn(-coef * k_sq * _hermitian_symmetrize(spec)).real


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

DENSITY_MAGIC = b"OLDGRID\0"
DENSITY_VERSION = 1


def write_density_csv(field: DensityField, path) -> Path:
    path = Path(path)
    pts = field.grid.points().reshape(-1, 3)
    block = np.column_stack([pts, field.values.reshape(-1)])
    with path.open("w", newline="\n") as fh:
        fh.write("x1,x2,x3,value\n")
        np.savetxt(fh, block, fmt="%.17g", delimiter=",")
    return path


def read_density_csv(path) -> DensityField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    n = round(data.shape[0] ** (1 / 3))
    if n**3 != data.shape[0]:
        raise ValueError(f"{path}: row count is not a cube")
    ax = np.unique(data[:, 0])
    dx = ax[1] - ax[0]
    grid = SpectralGrid.from_extent(n, n * dx)
    return DensityField(grid, float("nan"), data[:, 3].reshape(n, n, n), 0.0, 0.0, 0.0)


def write_density_binary(field: DensityField, path) -> Path:
    """Layout: ``magic[8] = b"OLDGRID\\0" | u32 version | u8 endian tag (b"<")
    | 3 x u32 dims | f64 x_extent | f64 t | float64 values, C order, axis 0 = x1``.

    Integers and floats are little-endian; sample ``j`` on an axis sits at
    ``-x_extent/2 + j * x_extent / n``.
    """
    path = Path(path)
    n = field.grid.n_per_axis
    with path.open("wb") as fh:
        fh.write(DENSITY_MAGIC)
        fh.write(struct.pack("<Ic3Idd", DENSITY_VERSION, b"<", n, n, n, field.grid.x_extent, field.t))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    return path


def read_density_binary(path) -> DensityField:
    raw = Path(path).read_bytes()
    if raw[:8] != DENSITY_MAGIC:
        raise ValueError(f"{path}: not a density grid (bad magic)")
    head = struct.Struct("<Ic3Idd")
    version, endian, n1, n2, n3, extent, t = head.unpack_from(raw, 8)
    if version != DENSITY_VERSION or endian != b"<":
        raise ValueError(f"{path}: unsupported density grid version/endianness")
    values = np.frombuffer(raw, dtype="<f8", offset=8 + head.size).astype(float)
    if values.size != n1 * n2 * n3:
        raise ValueError(f"{path}: truncated density grid")
    grid = SpectralGrid.from_extent(n1, extent)
    return DensityField(grid, t, values.reshape(n1, n2, n3), 0.0, 0.0, 0.0)


def density_header(field: DensityField) -> str:
    return json.dumps({"grid": field.grid.to_dict(), "t": field.t}, sort_keys=True)
