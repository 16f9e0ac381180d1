"""Trajectory integration of the orthogonal-noise Langevin system.

Two explicit schemes are offered:

* ``euler_maruyama`` -- plain Ito Euler step; its speed drifts by O(dt).
* ``speed_projected`` -- Euler step for the direction, then the velocity is
  rescaled onto the exact deterministic speed curve.

The batch driver runs one numba kernel over all trajectories.  Increments
come from :mod:`ortholangevin.rng`, keyed by ``(seed, trajectory, step)``,
so results do not depend on thread count or scheduling.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numba as nb
import numpy as np

from .core import (
    Constant,
    ModelParams,
    SpeedLaw,
    ortho_cross_noise,
    params_from_dict,
    params_to_dict,
    speed_squared,
    speed_squared_on_grid,
)
from .errors import TimeNotSampled, ZeroVelocity
from .rng import STREAM_WIENER, normals3

__all__ = [
    "State",
    "IntegratorScheme",
    "Ensemble",
    "em_step",
    "speed_projected_step",
    "simulate_ensemble",
    "write_ensemble_csv",
    "read_ensemble_csv",
    "write_ensemble_binary",
    "read_ensemble_binary",
    "read_ensemble",
    "ENSEMBLE_MAGIC",
    "ENSEMBLE_VERSION",
]

SchemeKind = Literal["euler_maruyama", "speed_projected"]
_SCHEMES = ("euler_maruyama", "speed_projected")
_STABILITY_LIMIT = 0.5


@dataclass(frozen=True)
class State:
    t: float
    x: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class IntegratorScheme:
    kind: SchemeKind
    dt: float

    def __post_init__(self):
        if self.kind not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {_SCHEMES}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def check_stability(self, a_max):
        if self.kind == "euler_maruyama" and self.dt * a_max >= _STABILITY_LIMIT:
            raise ValueError(
                f"dt * max(a) = {self.dt * a_max:g} violates the Euler-Maruyama guard (< {_STABILITY_LIMIT})"
            )


# ---------------------------------------------------------------------------
# Single-step reference implementations
# ---------------------------------------------------------------------------


def em_step(s: State, params: ModelParams, dt, dw) -> State:
    """One Ito Euler-Maruyama step; position advances with the pre-step velocity."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = float(params.coeffs.a_at(s.t))
    b = float(params.coeffs.b_at(s.t))
    kick = ortho_cross_noise(s.v, dw, b)
    v_new = s.v + (-a * s.v + np.cross(s.v, params.H)) * dt + kick
    if not np.linalg.norm(v_new) > 0:
        raise ZeroVelocity("velocity collapsed to zero; reduce dt")
    return State(s.t + dt, s.x + s.v * dt, v_new)


def speed_projected_step(s: State, params: ModelParams, dt, dw, law: SpeedLaw) -> State:
    """Euler step followed by rescaling onto ``|v|^2 = speed_squared(t + dt)``."""
    nxt = em_step(s, params, dt, dw)
    target = speed_squared(nxt.t, law)
    scale = np.sqrt(target / float(nxt.v @ nxt.v))
    return State(nxt.t, nxt.x, nxt.v * scale)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    """Sampled trajectories.

    ``positions`` and ``velocities`` have shape ``(n_traj, n_samples, 3)``.
    ``speed_innovation`` holds, per trajectory and sample time, the
    zero-mean accumulator ``sum_k (1 - a_k dt)^{2(N-1-k)} b_k^2 (|dw_perp,k|^2 - 2 dt)``
    where ``dw_perp`` is the part of the increment transverse to the
    pre-step velocity.  It is a control variate for speed statistics of the
    Euler scheme (its expectation is exactly zero).
    """

    params: ModelParams
    scheme: IntegratorScheme
    master_seed: int
    sample_times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    speed_innovation: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return self.positions.shape[0]

    def index_of(self, t) -> int:
        hits = np.flatnonzero(np.isclose(self.sample_times, t, rtol=1e-12, atol=1e-12))
        if hits.size == 0:
            raise TimeNotSampled(f"t={t} is not a sample time")
        return int(hits[0])

    def positions_at(self, t) -> np.ndarray:
        return self.positions[:, self.index_of(t)]

    def velocities_at(self, t) -> np.ndarray:
        return self.velocities[:, self.index_of(t)]

    def states(self, trajectory_index):
        return [
            State(float(t), self.positions[trajectory_index, i].copy(), self.velocities[trajectory_index, i].copy())
            for i, t in enumerate(self.sample_times)
        ]

    def same_data(self, other: "Ensemble") -> bool:
        return (
            np.array_equal(self.sample_times, other.sample_times)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.velocities, other.velocities)
        )


@nb.njit(parallel=True, cache=True)
def _integrate(seed, dt, n_steps, x0, v0, H, a_tab, b_tab, speed_tab, projected,
               sample_steps, out_x, out_v, out_cv, fail):
    n_traj = out_x.shape[0]
    n_samp = sample_steps.shape[0]
    sq_dt = np.sqrt(dt)
    for j in nb.prange(n_traj):
        x_0, x_1, x_2 = x0[0], x0[1], x0[2]
        v_0, v_1, v_2 = v0[0], v0[1], v0[2]
        cv = 0.0
        si = 0
        if sample_steps[0] == 0:
            out_x[j, 0, 0], out_x[j, 0, 1], out_x[j, 0, 2] = x_0, x_1, x_2
            out_v[j, 0, 0], out_v[j, 0, 1], out_v[j, 0, 2] = v_0, v_1, v_2
            out_cv[j, 0] = 0.0
            si = 1
        for k in range(n_steps):
            z0, z1, z2 = normals3(seed, j, k, STREAM_WIENER)
            w_0 = sq_dt * z0
            w_1 = sq_dt * z1
            w_2 = sq_dt * z2
            a = a_tab[k]
            b = b_tab[k]
            sp2 = v_0 * v_0 + v_1 * v_1 + v_2 * v_2
            c = b / np.sqrt(sp2)
            # noise kick (b/|v|) v x dw
            n_0 = c * (v_1 * w_2 - v_2 * w_1)
            n_1 = c * (v_2 * w_0 - v_0 * w_2)
            n_2 = c * (v_0 * w_1 - v_1 * w_0)
            vw = v_0 * w_0 + v_1 * w_1 + v_2 * w_2
            w_perp_sq = w_0 * w_0 + w_1 * w_1 + w_2 * w_2 - vw * vw / sp2
            damp = 1.0 - a * dt
            cv = damp * damp * cv + b * b * (w_perp_sq - 2.0 * dt)
            # precession v x H
            h_0 = v_1 * H[2] - v_2 * H[1]
            h_1 = v_2 * H[0] - v_0 * H[2]
            h_2 = v_0 * H[1] - v_1 * H[0]
            nv_0 = v_0 + (-a * v_0 + h_0) * dt + n_0
            nv_1 = v_1 + (-a * v_1 + h_1) * dt + n_1
            nv_2 = v_2 + (-a * v_2 + h_2) * dt + n_2
            x_0 += v_0 * dt
            x_1 += v_1 * dt
            x_2 += v_2 * dt
            nsp2 = nv_0 * nv_0 + nv_1 * nv_1 + nv_2 * nv_2
            if not (nsp2 > 0.0) or not np.isfinite(nsp2):
                fail[j] = k
                break
            if projected:
                s = np.sqrt(speed_tab[k + 1] / nsp2)
                nv_0 *= s
                nv_1 *= s
                nv_2 *= s
            v_0, v_1, v_2 = nv_0, nv_1, nv_2
            if si < n_samp and sample_steps[si] == k + 1:
                out_x[j, si, 0], out_x[j, si, 1], out_x[j, si, 2] = x_0, x_1, x_2
                out_v[j, si, 0], out_v[j, si, 1], out_v[j, si, 2] = v_0, v_1, v_2
                out_cv[j, si] = cv
                si += 1


@contextmanager
def _threads(n):
    if n is None:
        yield
        return
    previous = nb.get_num_threads()
    nb.set_num_threads(max(1, min(int(n), nb.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        nb.set_num_threads(previous)


def _sample_steps(sample_times, dt):
    times = np.asarray(sample_times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("sample_times must be a non-empty 1-D list")
    if times[0] != 0:
        raise ValueError("sample_times must start at 0")
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample_times must be strictly increasing")
    steps = np.rint(times / dt).astype(np.int64)
    if not np.allclose(steps * dt, times, rtol=1e-9, atol=1e-12):
        raise ValueError("every sample time must be an integer multiple of dt")
    return steps


def _coefficient_tables(params, n_steps, dt, need_speed):
    grid = np.arange(n_steps + 1, dtype=float) * dt
    prof = params.coeffs
    if isinstance(prof, Constant):
        a_tab = np.full(n_steps + 1, prof.a)
        b_tab = np.full(n_steps + 1, prof.b)
    else:
        a_tab = np.asarray(prof.a_at(grid), dtype=float)
        b_tab = np.asarray(prof.b_at(grid), dtype=float)
    # a = 0 is admitted (free flight via a General profile); negative values are not
    if np.any(a_tab < 0) or np.any(b_tab < 0):
        raise ValueError("coefficients must satisfy a >= 0 and b >= 0 on the simulated range")
    speed_tab = speed_squared_on_grid(grid, params.speed_law) if need_speed else np.empty(0)
    return a_tab, b_tab, speed_tab


def simulate_ensemble(params: ModelParams, scheme: IntegratorScheme, n_traj, sample_times,
                      master_seed, threads=None) -> Ensemble:
    """Integrate ``n_traj`` independent trajectories and sample them.

    Trajectory ``j`` draws its increments from lineage ``(master_seed, j)``,
    so the output is bitwise reproducible for any ``threads`` value.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if not 0 <= master_seed < 2**64:
        raise ValueError("master_seed must fit in an unsigned 64-bit integer")
    steps = _sample_steps(sample_times, scheme.dt)
    n_steps = int(steps[-1])
    projected = scheme.kind == "speed_projected"
    a_tab, b_tab, speed_tab = _coefficient_tables(params, n_steps, scheme.dt, projected)
    scheme.check_stability(float(a_tab.max()))
    if not projected:
        speed_tab = np.zeros(1)

    n_samp = steps.size
    out_x = np.zeros((n_traj, n_samp, 3))
    out_v = np.zeros((n_traj, n_samp, 3))
    out_cv = np.zeros((n_traj, n_samp))
    fail = np.full(n_traj, -1, dtype=np.int64)
    with _threads(threads):
        _integrate(
            np.uint64(master_seed), float(scheme.dt), n_steps,
            params.x0, params.v0, params.H, a_tab, b_tab, speed_tab, projected,
            steps, out_x, out_v, out_cv, fail,
        )
    bad = np.flatnonzero(fail >= 0)
    if bad.size:
        j = int(bad[0])
        raise ZeroVelocity("velocity collapsed to zero; reduce dt", trajectory_index=j, step_index=int(fail[j]))
    return Ensemble(
        params=params,
        scheme=scheme,
        master_seed=int(master_seed),
        sample_times=steps * scheme.dt,
        positions=out_x,
        velocities=out_v,
        speed_innovation=out_cv,
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

ENSEMBLE_MAGIC = b"OLENSEMB"
ENSEMBLE_VERSION = 1
_CSV_HEADER = "t,traj_id,x1,x2,x3,v1,v2,v3"


def _header(ens: Ensemble) -> dict:
    return {
        "params": params_to_dict(ens.params),
        "scheme": {"kind": ens.scheme.kind, "dt": ens.scheme.dt},
        "master_seed": ens.master_seed,
        "n_traj": ens.n_traj,
        "sample_times": ens.sample_times.tolist(),
    }


def write_ensemble_csv(ens: Ensemble, path) -> Path:
    """Rows ordered by sample time, then trajectory id; floats in round-trip form."""
    path = Path(path)
    n, m = ens.n_traj, ens.sample_times.size
    ids = np.arange(n)
    with path.open("w", newline="\n") as fh:
        fh.write(_CSV_HEADER + "\n")
        for i in range(m):
            block = np.column_stack([
                np.full(n, ens.sample_times[i]), ids, ens.positions[:, i], ens.velocities[:, i],
            ])
            np.savetxt(fh, block, fmt=["%.17g", "%d"] + ["%.17g"] * 6, delimiter=",")
    return path


def read_ensemble_csv(path):
    """Return ``(sample_times, positions, velocities)`` from the CSV form."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = np.unique(data[:, 0])
    n = int(data[:, 1].max()) + 1
    m = times.size
    if data.shape[0] != n * m:
        raise ValueError("ensemble CSV is not a complete (time x trajectory) table")
    data = data.reshape(m, n, 8)
    return times, data[:, :, 2:5].transpose(1, 0, 2).copy(), data[:, :, 5:8].transpose(1, 0, 2).copy()


def write_ensemble_binary(ens: Ensemble, path) -> Path:
    """Binary layout (all integers little-endian):

    ``magic[8] = b"OLENSEMB" | u32 version | u32 header_len | header JSON (utf-8)
    | float64 LE positions (n_traj, n_samples, 3) | float64 LE velocities (same)``
    """
    path = Path(path)
    header = json.dumps(_header(ens), sort_keys=True, separators=(",", ":")).encode()
    with path.open("wb") as fh:
        fh.write(ENSEMBLE_MAGIC)
        fh.write(struct.pack("<II", ENSEMBLE_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(ens.positions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.velocities, dtype="<f8").tobytes())
    return path


def read_ensemble_binary(path) -> Ensemble:
    raw = Path(path).read_bytes()
    if raw[:8] != ENSEMBLE_MAGIC:
        raise ValueError(f"{path}: not an ensemble file (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != ENSEMBLE_VERSION:
        raise ValueError(f"{path}: unsupported ensemble version {version}")
    header = json.loads(raw[16:16 + hlen])
    n, m = header["n_traj"], len(header["sample_times"])
    body = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    if body.size != 2 * n * m * 3:
        raise ValueError(f"{path}: truncated ensemble body")
    pos = body[: n * m * 3].reshape(n, m, 3).astype(float)
    vel = body[n * m * 3:].reshape(n, m, 3).astype(float)
    return Ensemble(
        params=params_from_dict(header["params"]),
        scheme=IntegratorScheme(header["scheme"]["kind"], header["scheme"]["dt"]),
        master_seed=header["master_seed"],
        sample_times=np.asarray(header["sample_times"], dtype=float),
        positions=pos,
        velocities=vel,
    )


def read_ensemble(path) -> Ensemble:
    """Read the binary form (the CSV form lacks model metadata)."""
    return read_ensemble_binary(path)
