"""Monte-Carlo estimators and comparisons against model predictions.

All reductions run over trajectories in index order with numpy's pairwise
summation, so a report is a deterministic function of the ensemble.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from scipy import integrate, stats

from .core import ModelParams, integrated_a, speed_squared, vec3
from .errors import SparseHistogram
from .sde import Ensemble
from .spectral import RICHARDSON_TOL, DensityField, SpectralGrid

__all__ = [
    "EmpiricalCF",
    "ComparisonReport",
    "HistogramBinning",
    "empirical_char_fn",
    "moment_report",
    "mean_position",
    "position_covariance",
    "variance_ratio",
    "density_l1_compare",
    "ensemble_l1_compare",
    "bin_masses",
    "l1_noise_floor",
    "speed_bias",
    "write_reports_jsonl",
    "read_reports_jsonl",
    "summary_table",
]

Metric = Literal["sup_cf_error", "l1_density", "moment_z_scores", "variance_ratio"]
_Z_METRICS = ("moment_z_scores", "variance_ratio")
_MIN_BINS = 8
_MIN_EXPECTED = 10.0
# deterministic ensembles have a zero standard error; below this the error
# is floating-point rounding, not sampling noise
_SE_FLOOR = 1e-12


@dataclass(frozen=True)
class EmpiricalCF:
    lam: np.ndarray
    t: float
    estimate: complex
    std_error: float
    n: int


@dataclass
class ComparisonReport:
    experiment_id: str
    metric: Metric
    value: float
    threshold: float
    verdict: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.metric in _Z_METRICS:
            ok = abs(self.value) <= self.threshold
        else:
            ok = self.value <= self.threshold
        self.verdict = "pass" if ok else "fail"

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), sort_keys=True, allow_nan=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


# ---------------------------------------------------------------------------
# Characteristic function
# ---------------------------------------------------------------------------


def empirical_char_fn(ens: Ensemble, lam, t) -> EmpiricalCF:
    """Sample mean of ``exp(i (lam, x(t)))`` with a jackknife standard error.

    For the mean, the leave-one-out jackknife reduces to the sample standard
    deviation of the complex summands over ``sqrt(n)``; the closed form is
    used rather than ``n`` explicit refits.
    """
    lam = vec3(lam)
    x = ens.positions_at(t)
    n = x.shape[0]
    z = np.exp(1j * (x @ lam))
    mean = z.sum() / n
    if n > 1:
        resid = z - mean
        se = math.sqrt(float(np.sum(resid.real**2 + resid.imag**2)) / (n * (n - 1)))
    else:
        se = 0.0
    return EmpiricalCF(lam, float(t), complex(mean), se, n)


def sup_cf_error(ens: Ensemble, predictions: dict, experiment_id="", threshold=3.0,
                 pred_tol=RICHARDSON_TOL) -> ComparisonReport:
    """Largest ``|empirical - predicted| / std_error`` over ``{(lam, t): psi}``.

    The standard error is floored at ``pred_tol``, the accuracy of the
    predicted values, so deterministic ensembles are not failed on solver
    round-off.
    """
    worst, rows = 0.0, []
    for (lam, t), psi in predictions.items():
        cf = empirical_char_fn(ens, lam, t)
        diff = abs(cf.estimate - psi)
        z = float(diff / max(cf.std_error, pred_tol))
        worst = max(worst, z)
        rows.append({"lambda": list(lam), "t": t, "mc": cf.estimate, "predicted": complex(psi),
                     "std_error": cf.std_error, "z": z})
    return ComparisonReport(experiment_id, "sup_cf_error", worst, threshold,
                            metadata={"quantity": f"max z over {len(rows)} cells", "cells": rows})


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


def mean_position(params: ModelParams, t) -> np.ndarray:
    """Exact ``E x(t)``.

    The mean velocity obeys the noise-free linear equation
    ``m' = -a m + m x H``: damping times a rotation about ``H``.
    """
    prof = params.coeffs
    h_norm = float(np.linalg.norm(params.H))
    axis = -params.H / h_norm if h_norm > 0 else np.zeros(3)
    v0 = params.v0

    def mean_velocity(s):
        damp = math.exp(-integrated_a(s, prof))
        if h_norm == 0:
            return damp * v0
        th = h_norm * s
        rot = v0 * math.cos(th) + np.cross(axis, v0) * math.sin(th) + axis * (axis @ v0) * (1 - math.cos(th))
        return damp * rot

    if t == 0:
        return params.x0.copy()
    out = np.empty(3)
    for i in range(3):
        out[i], _ = integrate.quad(lambda s: mean_velocity(s)[i], 0.0, float(t), epsabs=1e-13, epsrel=1e-11, limit=200)
    return params.x0 + out


def position_covariance(ens: Ensemble, t) -> np.ndarray:
    x = ens.positions_at(t)
    d = x - x.sum(axis=0) / x.shape[0]
    return d.T @ d / max(x.shape[0] - 1, 1)


def _transverse_frame(v0):
    u = v0 / np.linalg.norm(v0)
    helper = np.eye(3)[np.argmin(np.abs(u))]
    e2 = np.cross(u, helper)
    e2 /= np.linalg.norm(e2)
    return u, e2, np.cross(u, e2)


def variance_ratio(ens: Ensemble, t, direction=None):
    """Position variance along ``direction`` (default ``v0``) over the mean
    transverse variance, with a delta-method standard error."""
    u, e2, e3 = _transverse_frame(vec3(ens.params.v0 if direction is None else direction))
    x = ens.positions_at(t)
    n = x.shape[0]
    x = x - x.sum(axis=0) / n
    par = (x @ u) ** 2
    perp = 0.5 * ((x @ e2) ** 2 + (x @ e3) ** 2)
    mp, mq = par.sum() / n, perp.sum() / n
    if mq == 0:
        return math.nan, math.nan
    ratio = mp / mq
    resid = par - ratio * perp
    se = math.sqrt(float(np.sum(resid**2)) / (n * (n - 1))) / mq
    return float(ratio), float(se)


def _z(diff, se):
    return float(diff / max(se, _SE_FLOOR))


def moment_report(ens: Ensemble, t, experiment_id="", threshold=3.0, expected_ratio=None,
                  expected_mean=None) -> list[ComparisonReport]:
    """z-scores for velocity second moments, position mean and (optionally)
    the parallel/transverse variance ratio.

    Velocity moments are compared with ``|v(t)|^2 / 3`` per axis (isotropic
    direction); the position mean with :func:`mean_position` unless
    ``expected_mean`` is given.  The ratio is only scored when
    ``expected_ratio`` is supplied.
    """
    idx = ens.index_of(t)
    v = ens.velocities[:, idx]
    x = ens.positions[:, idx]
    n = v.shape[0]
    reports = []

    target = speed_squared(float(t), ens.params.speed_law) / 3
    for i in range(3):
        sq = v[:, i] ** 2
        m = sq.sum() / n
        se = float(np.std(sq, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
        reports.append(ComparisonReport(
            experiment_id, "moment_z_scores", _z(m - target, se), threshold,
            metadata={"quantity": f"v{i + 1}^2", "t": float(t), "estimate": m, "expected": target, "std_error": se},
        ))

    mu = mean_position(ens.params, float(t)) if expected_mean is None else vec3(expected_mean)
    xm = x.sum(axis=0) / n
    var = np.var(x, axis=0, ddof=1) if n > 1 else np.zeros(3)
    for i in range(3):
        se = math.sqrt(var[i] / n)
        reports.append(ComparisonReport(
            experiment_id, "moment_z_scores", _z(xm[i] - mu[i], se), threshold,
            metadata={"quantity": f"mean x{i + 1}", "t": float(t), "estimate": xm[i], "expected": mu[i],
                      "std_error": se, "variance": var[i]},
        ))

    if expected_ratio is not None:
        ratio, se = variance_ratio(ens, t)
        reports.append(ComparisonReport(
            experiment_id, "variance_ratio", _z(ratio - expected_ratio, se), threshold,
            metadata={"t": float(t), "ratio": ratio, "expected": expected_ratio, "std_error": se},
        ))
    return reports


def speed_bias(ens: Ensemble, t, exact=None):
    """Mean ``|v(t)|^2`` minus its exact value, with the speed-innovation
    control variate removed by regression.

    Returns ``(bias, std_error)``.  The control variate has zero mean, so
    subtracting ``beta * cv`` leaves the estimate unbiased while cancelling
    most of the sampling noise.
    """
    idx = ens.index_of(t)
    v = ens.velocities[:, idx]
    y = np.einsum("ij,ij->i", v, v)
    exact = speed_squared(float(t), ens.params.speed_law) if exact is None else exact
    n = y.size
    cv = None if ens.speed_innovation is None else ens.speed_innovation[:, idx]
    if cv is not None and np.any(cv != 0):
        c = cv - cv.sum() / n
        beta = float(np.sum((y - y.sum() / n) * c) / np.sum(c * c))
        y = y - beta * cv
    bias = y.sum() / n - exact
    se = float(np.std(y, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    return float(bias), se


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HistogramBinning:
    """Axis-aligned box ``[lower, upper)`` split into ``bins`` cells per axis."""

    lower: tuple
    upper: tuple
    bins: tuple

    def __post_init__(self):
        lo, hi, nb_ = (np.broadcast_to(np.asarray(a, dtype=float), 3) for a in (self.lower, self.upper, self.bins))
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))
        object.__setattr__(self, "bins", tuple(int(v) for v in nb_))
        if any(h <= l for l, h in zip(self.lower, self.upper)):
            raise ValueError("upper must exceed lower on every axis")
        if min(self.bins) < _MIN_BINS:
            raise ValueError(f"need at least {_MIN_BINS} bins per axis")

    @classmethod
    def centred(cls, centre, half_width, bins) -> "HistogramBinning":
        c = np.broadcast_to(np.asarray(centre, dtype=float), 3)
        w = np.broadcast_to(np.asarray(half_width, dtype=float), 3)
        return cls(tuple(c - w), tuple(c + w), bins)

    @classmethod
    def for_grid(cls, grid: SpectralGrid, cells_per_bin=1) -> "HistogramBinning":
        """Bins made of whole grid cells (cell ``j`` is centred on sample ``j``)."""
        n = grid.n_per_axis
        if n % cells_per_bin:
            raise ValueError("cells_per_bin must divide n_per_axis")
        lo = grid.axis[0] - 0.5 * grid.dx
        return cls((lo,) * 3, (lo + grid.x_extent,) * 3, (n // cells_per_bin,) * 3)

    def edges(self):
        return [np.linspace(l, h, b + 1) for l, h, b in zip(self.lower, self.upper, self.bins)]

    def counts(self, points) -> np.ndarray:
        counts, _ = np.histogramdd(points, bins=self.edges())
        return counts


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


def bin_masses(predicted, binning: HistogramBinning) -> np.ndarray:
    """Predicted probability per bin.

    ``predicted`` may be a callable density of points ``(..., 3)``
    (integrated with 4-point Gauss-Legendre per axis per bin), a
    :class:`DensityField` whose cells tile the bins, or an array of
    per-bin masses.
    """
    if isinstance(predicted, DensityField):
        grid = predicted.grid
        n = grid.n_per_axis
        k = n // binning.bins[0]
        expect = HistogramBinning.for_grid(grid, k) if k >= 1 and n % binning.bins[0] == 0 else None
        if expect is None or not np.allclose(expect.lower, binning.lower) or not np.allclose(expect.upper, binning.upper):
            raise ValueError("binning must be HistogramBinning.for_grid(field.grid, k) for a density field")
        b = n // k
        cell = predicted.values * grid.cell_volume
        return cell.reshape(b, k, b, k, b, k).sum(axis=(1, 3, 5))
    if callable(predicted):
        axes = []
        for e in binning.edges():
            mid, half = 0.5 * (e[1:] + e[:-1]), 0.5 * np.diff(e)
            axes.append(((mid[:, None] + half[:, None] * _GL_NODES).ravel(), (half[:, None] * _GL_WEIGHTS).ravel()))
        pts = np.stack(np.meshgrid(axes[0][0], axes[1][0], axes[2][0], indexing="ij"), axis=-1)
        w = np.einsum("i,j,k->ijk", axes[0][1], axes[1][1], axes[2][1])
        vals = np.asarray(predicted(pts), dtype=float) * w
        q = len(_GL_NODES)
        bx, by, bz = binning.bins
        return vals.reshape(bx, q, by, q, bz, q).sum(axis=(1, 3, 5))
    masses = np.asarray(predicted, dtype=float)
    if masses.shape != binning.bins:
        raise ValueError(f"per-bin masses must have shape {binning.bins}")
    return masses


def l1_noise_floor(probs, n, n_other=None) -> float:
    """Expected L1 between an n-sample histogram and ``probs`` (Gaussian
    approximation, half-normal mean per bin); with ``n_other`` it is the
    floor between two independent histograms of sizes ``n`` and ``n_other``."""
    p = np.clip(np.asarray(probs, dtype=float).ravel(), 0.0, 1.0)
    var = p * (1 - p) / n
    if n_other is not None:
        var = var + p * (1 - p) / n_other
    return float(np.sum(np.sqrt(2 * var / math.pi)))


def _chi_square(counts, expected):
    flat_o, flat_e = counts.ravel(), expected.ravel()
    good = flat_e >= _MIN_EXPECTED
    if not np.any(good):
        raise SparseHistogram(f"no bin has >= {_MIN_EXPECTED:g} expected counts")
    obs = list(flat_o[good])
    exp = list(flat_e[good])
    pool_o, pool_e = float(flat_o[~good].sum()), float(flat_e[~good].sum())
    if pool_e >= _MIN_EXPECTED:
        obs.append(pool_o)
        exp.append(pool_e)
    elif pool_o > 0 or pool_e > 0:
        # too small to stand alone: fold into the weakest qualifying cell
        j = int(np.argmin(exp))
        obs[j] += pool_o
        exp[j] += pool_e
    obs, exp = np.asarray(obs), np.asarray(exp)
    # renormalise so the statistic tests shape, not the total
    exp = exp * obs.sum() / exp.sum()
    chi2 = float(np.sum((obs - exp) ** 2 / exp))
    dof = obs.size - 1
    p_value = float(stats.chi2.sf(chi2, dof)) if dof > 0 else 1.0
    return chi2, dof, p_value, int(good.sum())


def density_l1_compare(ens: Ensemble, t, predicted, binning: HistogramBinning, experiment_id="",
                       threshold=None) -> ComparisonReport:
    """L1 distance between the position histogram at ``t`` and a prediction.

    Mass outside the binning box counts towards the distance.  A chi-square
    statistic is attached in the metadata; bins with fewer than 10 expected
    counts are pooled into one cell.  With ``threshold=None`` the pass line
    is 1.5 times the multinomial noise floor.
    """
    x = ens.positions_at(t)
    n = x.shape[0]
    counts = binning.counts(x)
    probs = bin_masses(predicted, binning)
    out_obs = 1.0 - counts.sum() / n
    out_pred = max(0.0, 1.0 - float(probs.sum()))
    l1 = float(np.sum(np.abs(counts / n - probs)) + abs(out_obs - out_pred))
    expected = n * np.clip(probs, 0.0, None)
    chi2, dof, p_value, n_good = _chi_square(counts, expected)
    floor = l1_noise_floor(probs, n)
    return ComparisonReport(
        experiment_id, "l1_density", l1, 1.5 * floor if threshold is None else float(threshold),
        metadata={"t": float(t), "n": n, "bins": list(binning.bins), "outside_observed": out_obs,
                  "outside_predicted": out_pred, "chi2": chi2, "dof": dof, "p_value": p_value,
                  "qualifying_bins": n_good, "noise_floor": floor},
    )


def ensemble_l1_compare(ens_a: Ensemble, ens_b: Ensemble, t, binning: HistogramBinning,
                        experiment_id="", threshold=None) -> ComparisonReport:
    """L1 distance between two position histograms (outside mass included).

    The default pass line is 1.5 times the two-sample noise floor computed
    from the pooled histogram.
    """
    xa, xb = ens_a.positions_at(t), ens_b.positions_at(t)
    na, nb_ = xa.shape[0], xb.shape[0]
    ca, cb = binning.counts(xa), binning.counts(xb)
    l1 = float(np.sum(np.abs(ca / na - cb / nb_)) + abs(ca.sum() / na - cb.sum() / nb_))
    pooled = (ca + cb) / (na + nb_)
    floor = l1_noise_floor(pooled, na, nb_)
    return ComparisonReport(
        experiment_id, "l1_density", l1, 1.5 * floor if threshold is None else float(threshold),
        metadata={"t": float(t), "n": [na, nb_], "bins": list(binning.bins), "noise_floor": floor},
    )


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def write_reports_jsonl(reports, path) -> Path:
    path = Path(path)
    with path.open("w", newline="\n") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    return path


def read_reports_jsonl(path) -> list[ComparisonReport]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(ComparisonReport(d["experiment_id"], d["metric"], d["value"], d["threshold"],
                                        metadata=d.get("metadata", {})))
    return out


def summary_table(reports) -> str:
    rows = [("experiment", "metric", "detail", "value", "threshold", "verdict")]
    for r in reports:
        detail = str(r.metadata.get("quantity", r.metadata.get("t", "")))
        rows.append((r.experiment_id, r.metric, detail, f"{r.value:.4g}", f"{r.threshold:.4g}", r.verdict))
    widths = [max(len(str(row[i])) for row in rows) for i in range(6)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


Predictor = Callable[[np.ndarray], np.ndarray]
