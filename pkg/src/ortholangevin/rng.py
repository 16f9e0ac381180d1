"""Counter-based Gaussian increments.

Every Wiener increment is a pure function of ``(master_seed,
trajectory_index, step_index)``.  A Philox4x64-10 block is evaluated with
key ``(master_seed, trajectory_index)`` and counter
``(step_index, stream, 0, 0)``; its 64-bit words feed a 128-layer ziggurat
(Doornik's ZIGNOR layout).  The rare wedge/tail rejections for the m-th
normal draw further words from counters ``(step_index, stream, 1 + m, attempt)``.
No generator state survives between calls, so neither the visiting order of
trajectories nor the thread count can change a draw.
"""

import math
from dataclasses import dataclass

import numba as nb
import numpy as np
from llvmlite import ir
from numba import types
from numba.extending import intrinsic

__all__ = [
    "RngLineage",
    "philox4x64",
    "normals3",
    "wiener_increment",
    "wiener_increments",
    "STREAM_WIENER",
    "STREAM_AUX",
]

STREAM_WIENER = 0
STREAM_AUX = 1

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK7 = np.uint64(0x7F)
_S11 = np.uint64(11)
_TWO_M53 = 2.0**-53


def _zignor_tables(layers=128, r=3.442619855899, v=9.91256303526217e-3):
    x = np.zeros(layers + 1)
    f = math.exp(-0.5 * r * r)
    x[0] = v / f
    x[1] = r
    for i in range(2, layers):
        x[i] = math.sqrt(-2.0 * math.log(v / x[i - 1] + f))
        f = math.exp(-0.5 * x[i] * x[i])
    return x, x[1:] / x[:-1]


_ZIG_R = 3.442619855899
_ZIG_X, _ZIG_RATIO = _zignor_tables()


@intrinsic
def _mulhi(typingctx, a, b):
    """High 64 bits of the 128-bit product (one native multiply)."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        return builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))

    return sig, codegen


@nb.njit(inline="always")
def _mulhilo(a, b):
    return _mulhi(a, b), a * b


@nb.njit(cache=True)
def philox4x64(c0, c1, c2, c3, k0, k1):
    """Philox4x64 with 10 rounds; all arguments are ``np.uint64``."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(inline="always")
def _unit(w):
    # [0, 1) from the top 53 bits; the shifted word fits in int64, whose
    # float conversion is one instruction (uint64's is not)
    return np.float64(np.int64(w >> _S11)) * _TWO_M53


@nb.njit(inline="always")
def _open_unit(w):
    return (np.float64(np.int64(w >> _S11)) + 1.0) * _TWO_M53


@nb.njit(cache=True)
def _zig_slow(seed, traj, step, stream, m, layer, u):
    attempt = 0
    while True:
        b0, b1, b2, b3 = philox4x64(
            np.uint64(step), np.uint64(stream), np.uint64(1 + m), np.uint64(attempt),
            np.uint64(seed), np.uint64(traj),
        )
        if layer == 0:
            x = math.log(_open_unit(b0)) / _ZIG_R
            y = math.log(_open_unit(b1))
            if -2.0 * y >= x * x:
                return x - _ZIG_R if u < 0 else _ZIG_R - x
        else:
            x = u * _ZIG_X[layer]
            f0 = math.exp(-0.5 * (_ZIG_X[layer] * _ZIG_X[layer] - x * x))
            f1 = math.exp(-0.5 * (_ZIG_X[layer + 1] * _ZIG_X[layer + 1] - x * x))
            if f1 + _unit(b2) * (f0 - f1) < 1.0:
                return x
        layer = np.int64(b3 & _MASK7)
        u = 2.0 * _unit(b3) - 1.0
        attempt += 1
        if abs(u) < _ZIG_RATIO[layer]:
            return u * _ZIG_X[layer]


@nb.njit(inline="always")
def _zig_word(seed, traj, step, stream, m, w):
    layer = np.int64(w & _MASK7)
    u = 2.0 * _unit(w) - 1.0
    if abs(u) < _ZIG_RATIO[layer]:
        return u * _ZIG_X[layer]
    return _zig_slow(seed, traj, step, stream, m, layer, u)


@nb.njit(cache=True)
def normals3(seed, traj, step, stream):
    """Three independent N(0, 1) draws for one ``(seed, traj, step, stream)``."""
    w0, w1, w2, _ = philox4x64(
        np.uint64(step), np.uint64(stream), np.uint64(0), np.uint64(0),
        np.uint64(seed), np.uint64(traj),
    )
    return (_zig_word(seed, traj, step, stream, 0, w0),
            _zig_word(seed, traj, step, stream, 1, w1),
            _zig_word(seed, traj, step, stream, 2, w2))


@dataclass(frozen=True)
class RngLineage:
    master_seed: int
    trajectory_index: int

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in an unsigned 64-bit integer")
        if self.trajectory_index < 0:
            raise ValueError("trajectory_index must be >= 0")


def wiener_increment(lineage, step_index, dt):
    """Three-component Wiener increment with variance ``dt`` per axis."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if step_index < 0:
        raise ValueError("step_index must be >= 0")
    z = normals3(lineage.master_seed, lineage.trajectory_index, step_index, STREAM_WIENER)
    return math.sqrt(dt) * np.array(z)


@nb.njit(parallel=True, cache=True)
def _fill_normals(seed, traj, step0, stream, out):
    for k in nb.prange(out.shape[0]):
        z0, z1, z2 = normals3(seed, traj, step0 + k, stream)
        out[k, 0] = z0
        out[k, 1] = z1
        out[k, 2] = z2


def wiener_increments(lineage, n_steps, dt, first_step=0):
    """``(n_steps, 3)`` block of consecutive increments; same values as
    repeated :func:`wiener_increment` calls."""
    out = np.empty((n_steps, 3))
    _fill_normals(np.uint64(lineage.master_seed), lineage.trajectory_index, first_step, STREAM_WIENER, out)
    return math.sqrt(dt) * out
