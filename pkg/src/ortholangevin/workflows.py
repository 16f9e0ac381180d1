"""Config-driven experiment runners behind the command line.

Each runner writes its files into ``cfg.outputs.dir`` together with a
``manifest.json`` holding the canonical config, its hash, the seed, the
package version and a sha256 of every output.  Nothing time- or
host-dependent is written, so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import analysis, spectral
from .analysis import ComparisonReport, HistogramBinning
from .config import ExperimentConfig, config_digest
from .core import ModelParams, speed_squared
from .sde import IntegratorScheme, read_ensemble, simulate_ensemble, write_ensemble_binary, write_ensemble_csv

__all__ = ["RunResult", "run_simulate", "run_spectral", "run_compare", "run_sweep", "package_version"]


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunResult:
    files: list[Path] = field(default_factory=list)
    reports: list[ComparisonReport] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.reports)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.outputs.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg: ExperimentConfig, command: str, result: RunResult, extra=None) -> Path:
    out = _out_dir(cfg)
    manifest = {
        "command": command,
        "experiment": cfg.experiment,
        "config": json.loads(cfg.model_dump_json()),
        "config_sha256": config_digest(cfg),
        "seed": cfg.seeds.master,
        "version": package_version(),
        "outputs": {p.name: _sha256(p) for p in sorted(result.files)},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    result.files.append(path)
    return path


def _write_csv(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _finish_reports(cfg, result: RunResult, name="report"):
    out = _out_dir(cfg)
    result.files.append(analysis.write_reports_jsonl(result.reports, out / f"{name}.jsonl"))
    summary = out / f"{name}_summary.txt"
    summary.write_text(analysis.summary_table(result.reports) + "\n")
    result.files.append(summary)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate(cfg: ExperimentConfig, threads=None, params=None, seed=None, scheme=None, times=None):
    return simulate_ensemble(
        cfg.params() if params is None else params,
        cfg.integrator() if scheme is None else scheme,
        cfg.n_traj,
        cfg.sample_times if times is None else times,
        cfg.seeds.master if seed is None else seed,
        threads=threads,
    )


def run_simulate(cfg: ExperimentConfig, threads=None) -> RunResult:
    """Ensemble files plus a plot-ready speed curve (empirical vs exact)."""
    ens = _simulate(cfg, threads)
    out = _out_dir(cfg)
    result = RunResult()
    if "binary" in cfg.outputs.formats:
        result.files.append(write_ensemble_binary(ens, out / "ensemble.bin"))
    if "csv" in cfg.outputs.formats:
        result.files.append(write_ensemble_csv(ens, out / "ensemble.csv"))
    rows = []
    law = ens.params.speed_law
    for i, t in enumerate(ens.sample_times):
        v = ens.velocities[:, i]
        sq = np.einsum("ij,ij->i", v, v)
        exact = speed_squared(float(t), law)
        mean = sq.sum() / sq.size
        rows.append((float(t), mean, float(sq.min()), float(sq.max()), exact, (mean - exact) / exact))
    result.files.append(_write_csv(out / "speed_curve.csv",
                                   ["t", "mean_speed_sq", "min_speed_sq", "max_speed_sq", "exact_speed_sq", "rel_error"], rows))
    _write_manifest(cfg, "simulate", result)
    return result


# ---------------------------------------------------------------------------
# spectral
# ---------------------------------------------------------------------------


def _initial_density(cfg: ExperimentConfig, grid: spectral.SpectralGrid, centre):
    var = cfg.spectral.initial_density.variance
    rho = grid.sample(lambda p: spectral.gaussian_density(p, centre, var * np.eye(3)))
    return rho / grid.integrate(rho)


def cf_predictions(cfg: ExperimentConfig, params: ModelParams | None = None) -> dict:
    """``{(lam, t): psi}`` from the mode equation for every configured lambda and sample time."""
    params = cfg.params() if params is None else params
    times = list(cfg.sample_times)
    out = {}
    if cfg.spectral.lambdas:
        psi, _ = spectral.solve_modes(np.asarray(cfg.spectral.lambdas, dtype=float), params, times)
        for j, lam in enumerate(cfg.spectral.lambdas):
            for i, t in enumerate(times):
                out[(tuple(lam), float(t))] = complex(psi[i, j])
    return out


def run_spectral(cfg: ExperimentConfig, threads=None) -> RunResult:
    """Per-lambda CF curves and density grids; with a ``regime`` block the
    spectral regime sweep table is produced as well."""
    out = _out_dir(cfg)
    result = RunResult()
    preds = cf_predictions(cfg)
    if preds:
        index = {tuple(lam): j for j, lam in enumerate(cfg.spectral.lambdas)}
        rows = [(index[lam], *lam, t, psi.real, psi.imag, abs(psi)) for (lam, t), psi in preds.items()]
        result.files.append(_write_csv(out / "cf.csv", ["lambda_index", "lam1", "lam2", "lam3", "t", "re", "im", "abs"], rows))
    if cfg.grid is not None and cfg.spectral.density_times:
        params = cfg.params()
        grid = cfg.grid.build()
        rho0 = _initial_density(cfg, grid, params.x0)
        fields = spectral.densities_from_modes(grid, params, cfg.spectral.density_times, rho0)
        rows = []
        for k, fld in enumerate(fields):
            stem = f"density_{k:03d}"
            if "binary" in cfg.outputs.formats:
                result.files.append(spectral.write_density_binary(fld, out / f"{stem}.bin"))
            if "csv" in cfg.outputs.formats:
                result.files.append(spectral.write_density_csv(fld, out / f"{stem}.csv"))
            rows.append((stem, fld.t, fld.mass, fld.imag_residue, fld.negative_mass, fld.edge_weight))
        result.files.append(_write_csv(out / "densities.csv",
                                       ["file", "t", "mass", "imag_residue", "negative_mass", "edge_weight"], rows))
    if cfg.regime is not None:
        sweep = _regime_sweep(cfg, ["spectral"], threads)
        result.reports.extend(sweep.reports)
        result.files.append(_write_csv(out / "sweep.csv", _SWEEP_HEADER, sweep.rows))
        _finish_reports(cfg, result)
    _write_manifest(cfg, "spectral", result)
    return result


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _read_cf_csv(path: Path) -> dict:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {(tuple(row[1:4]), float(row[4])): complex(row[5], row[6]) for row in data}


def _binning_for_field(fld: spectral.DensityField, bins: int) -> HistogramBinning:
    n = fld.grid.n_per_axis
    k = max(1, n // bins)
    while n % k:
        k -= 1
    return HistogramBinning.for_grid(fld.grid, k)


def run_compare(cfg: ExperimentConfig, ensemble_path=None, prediction_path=None, threads=None) -> RunResult:
    """Compare an ensemble with a prediction and write a JSON-lines report.

    The ensemble is read from ``ensemble_path`` or simulated from the
    config.  The prediction may be a CF table (``cf.csv``), a density grid,
    or a second ensemble; without one, the configured lambdas are solved
    on the fly, and failing that a moment report is produced.
    """
    ens = read_ensemble(ensemble_path) if ensemble_path else _simulate(cfg, threads)
    th = cfg.thresholds
    exp_id = cfg.experiment
    result = RunResult()
    reports = result.reports
    kind = _prediction_kind(prediction_path)

    if kind == "ensemble":
        other = read_ensemble(prediction_path)
        t = float(ens.sample_times[-1])
        x = np.concatenate([ens.positions_at(t), other.positions_at(t)])
        binning = _auto_binning(x, cfg.sweep.binning)
        reports.append(analysis.ensemble_l1_compare(ens, other, t, binning, exp_id, th.l1))
    elif kind == "density":
        fld = spectral.read_density_binary(prediction_path)
        binning = _binning_for_field(fld, cfg.sweep.binning.bins)
        reports.append(analysis.density_l1_compare(ens, fld.t, fld, binning, exp_id, th.l1))
    else:
        preds = _read_cf_csv(Path(prediction_path)) if kind == "cf" else cf_predictions(cfg, ens.params)
        if preds:
            for (lam, t), psi in preds.items():
                reports.append(analysis.sup_cf_error(ens, {(lam, t): psi}, exp_id, th.cf_z))
        else:
            reports.extend(analysis.moment_report(ens, float(ens.sample_times[-1]), exp_id, th.moment_z))
    _finish_reports(cfg, result)
    _write_manifest(cfg, "compare", result, {"inputs": {
        "ensemble": _sha256(Path(ensemble_path)) if ensemble_path else None,
        "prediction": _sha256(Path(prediction_path)) if prediction_path else None,
    }})
    return result


def _prediction_kind(path):
    if path is None:
        return None
    head = Path(path).read_bytes()[:8]
    if head == b"OLENSEMB":
        return "ensemble"
    if head == spectral.DENSITY_MAGIC:
        return "density"
    return "cf"


def _auto_binning(x, bcfg, centre=None) -> HistogramBinning:
    c = x.mean(axis=0) if centre is None else centre
    if bcfg.half_width is not None:
        w = bcfg.half_width
    else:
        w = bcfg.sigmas * float(np.sqrt(np.max(np.var(x, axis=0))))
        w = w if w > 0 else 1.0
    return HistogramBinning.centred(c, w, bcfg.bins)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_SWEEP_HEADER = ["source", "epsilon", "t", "l1", "noise_floor", "var_ratio", "var_ratio_se",
                 "mean_par", "mean_par_se", "expected_mean_par", "std_max", "diffusivity_iso"]


@dataclass
class _Sweep:
    rows: list = field(default_factory=list)
    reports: list = field(default_factory=list)


def regime_model(cfg: ExperimentConfig, eps: float, source: str) -> tuple[ModelParams, IntegratorScheme]:
    """Model and scheme for one epsilon of a regime sweep.

    Diffusion runs start on the equilibrium sphere for Monte Carlo and at
    ``|v0|^2 = |v|^2/3`` (one-axis equipartition share) for the mode
    equation; wave runs start at ``|v0|^2 = |v~|^2`` for both.
    """
    reg = cfg.regime
    rp = reg.at(eps)
    base = cfg.params()
    direction = base.v0 / np.linalg.norm(base.v0)
    if reg.kind == "diffusion":
        prof = rp.diffusion_profile()
        v_sq = prof.b**2 / prof.a
        v0_sq = v_sq / 3 if source == "spectral" else v_sq
        scheme = IntegratorScheme(cfg.scheme.kind, reg.a_dt / prof.a)
    else:
        prof = rp.wave_profile()
        v0_sq = rp.v_tilde_sq
        scheme = cfg.integrator()
    return ModelParams(prof, direction * math.sqrt(v0_sq), base.x0, np.zeros(3)), scheme


def _steps_times(scheme, t):
    n = max(1, round(t / scheme.dt))
    return IntegratorScheme(scheme.kind, t / n), [0.0, t]


def _regime_sweep(cfg: ExperimentConfig, sources, threads) -> _Sweep:
    reg = cfg.regime
    eps_sorted = sorted(reg.epsilons, reverse=True)
    sweep = _Sweep()
    for source in sources:
        l1_prev = None
        for eps in eps_sorted:
            row, reps = (_mc_regime_point if source == "mc" else _spectral_regime_point)(cfg, eps, threads)
            sweep.rows.append(row)
            sweep.reports.extend(reps)
            l1 = row[3]
            if l1_prev is not None:
                sweep.reports.append(ComparisonReport(
                    f"{cfg.experiment}/{source}/monotone", "l1_density", l1, l1_prev,
                    metadata={"quantity": f"L1 trend at eps={eps:g}", "epsilon": eps, "note": "L1 must not exceed the value at the previous (larger) epsilon"},
                ))
            l1_prev = l1
    return sweep


def _mc_regime_point(cfg, eps, threads):
    reg = cfg.regime
    params, scheme = regime_model(cfg, eps, "mc")
    scheme, times = _steps_times(scheme, reg.t)
    t = reg.t
    ens = _simulate(cfg, threads, params=params, scheme=scheme, times=times)
    x = ens.positions_at(t)
    n = x.shape[0]
    u = params.v0 / np.linalg.norm(params.v0)
    exp_id = f"{cfg.experiment}/mc/eps={eps:g}"
    ratio, ratio_se = analysis.variance_ratio(ens, t)
    par = x @ u
    mean_par = par.sum() / n
    mean_par_se = float(np.std(par, ddof=1)) / math.sqrt(n)
    std_max = float(np.sqrt(np.max(np.linalg.eigvalsh(analysis.position_covariance(ens, t)))))
    d_iso = float(np.trace(analysis.position_covariance(ens, t))) / (6 * t)
    reports = []
    # per-epsilon distances are informational (L1 <= 2 always) unless a
    # threshold is configured; the verdicts of a sweep are the trend checks
    l1_line = 2.0 if cfg.thresholds.l1 is None else cfg.thresholds.l1
    if reg.kind == "diffusion":
        prof = params.coeffs
        v_sq = prof.b**2 / prof.a
        kernel = lambda p: spectral.diffusion_kernel(t, p, params.x0, u, v_sq, prof.a)  # noqa: E731
        cov = spectral.diffusion_kernel_covariance(t, u, v_sq, prof.a)
        binning = _auto_binning(x, cfg.sweep.binning, centre=params.x0) if cfg.sweep.binning.half_width else \
            HistogramBinning.centred(params.x0, cfg.sweep.binning.sigmas * math.sqrt(np.max(np.diag(cov))), cfg.sweep.binning.bins)
        rep = analysis.density_l1_compare(ens, t, kernel, binning, exp_id, l1_line)
        expected_par = float(params.x0 @ u)
        reports.append(ComparisonReport(exp_id, "variance_ratio", analysis._z(ratio - 2.0, ratio_se),
                                        cfg.thresholds.variance_ratio_z,
                                        metadata={"ratio": ratio, "expected": 2.0, "std_error": ratio_se}))
    else:
        target = params.x0 + params.v0 * t
        expected_par = float(target @ u)
        bins = cfg.sweep.binning.bins | 1  # odd, so the target sits mid-bin
        w = cfg.sweep.binning.half_width or 0.05 * float(np.linalg.norm(params.v0)) * t
        binning = HistogramBinning.centred(target, w, bins)
        point = np.zeros(binning.bins)
        point[(bins // 2,) * 3] = 1.0
        rep = analysis.density_l1_compare(ens, t, point, binning, exp_id, l1_line)
        reports.append(ComparisonReport(exp_id, "moment_z_scores", analysis._z(mean_par - expected_par, mean_par_se),
                                        cfg.thresholds.moment_z,
                                        metadata={"quantity": "mean along v0", "estimate": mean_par,
                                                  "expected": expected_par, "std_error": mean_par_se}))
        reports.append(ComparisonReport(exp_id, "moment_z_scores", std_max / (float(np.linalg.norm(params.v0)) * t), 0.15,
                                        metadata={"quantity": "max position std / (|v0| t)"}))
    reports.insert(0, rep)
    row = ("mc", eps, t, rep.value, rep.metadata.get("noise_floor", math.nan), ratio, ratio_se,
           mean_par, mean_par_se, expected_par, std_max, d_iso)
    return row, reports


def _spectral_regime_point(cfg, eps, threads):
    reg = cfg.regime
    if cfg.grid is None:
        raise ValueError("a spectral regime sweep needs a 'grid' block")
    params, _ = regime_model(cfg, eps, "spectral")
    grid = cfg.grid.build()
    t = reg.t
    var0 = cfg.spectral.initial_density.variance
    rho0 = _initial_density(cfg, grid, params.x0)
    fld = spectral.density_from_modes(grid, params, t, rho0)
    u = params.v0 / np.linalg.norm(params.v0)
    pts = grid.points()
    if reg.kind == "diffusion":
        prof = params.coeffs
        v_sq = prof.b**2 / prof.a
        cov = spectral.diffusion_kernel_covariance(t, u, v_sq, prof.a) + var0 * np.eye(3)
        pred = spectral.gaussian_density(pts, params.x0, cov)
    else:
        pred = spectral.wave_solution(
            t, pts, lambda p: spectral.gaussian_density(p, params.x0, var0 * np.eye(3)), params.v0)
    l1 = grid.integrate(np.abs(fld.values - pred))
    exp_id = f"{cfg.experiment}/spectral/eps={eps:g}"
    rep = ComparisonReport(exp_id, "l1_density", l1, 2.0,
                           metadata={"t": t, "mass": fld.mass, "negative_mass": fld.negative_mass,
                                     "imag_residue": fld.imag_residue})
    row = ("spectral", eps, t, l1, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, math.nan)
    return row, [rep]


def _reflection_sweep(cfg: ExperimentConfig, sources, threads) -> _Sweep:
    sweep = _Sweep()
    params = cfg.params()
    flipped = ModelParams(params.coeffs, -params.v0, params.x0, params.H)
    t = float(cfg.sample_times[-1])
    th = cfg.thresholds
    if "mc" in sources:
        ens_p = _simulate(cfg, threads, params=params)
        ens_m = _simulate(cfg, threads, params=flipped)
        ens_null = _simulate(cfg, threads, params=params, seed=cfg.seeds.null_run)
        x = np.concatenate([ens_p.positions_at(t), ens_m.positions_at(t)])
        binning = _auto_binning(x, cfg.sweep.binning, centre=params.x0)
        null = analysis.ensemble_l1_compare(ens_p, ens_null, t, binning, f"{cfg.experiment}/mc/null")
        rep = analysis.ensemble_l1_compare(ens_p, ens_m, t, binning, f"{cfg.experiment}/mc/reflection",
                                           threshold=null.value if th.l1 is None else th.l1)
        rep.metadata["null_l1"] = null.value
        sweep.reports.append(rep)
        sweep.rows.append(("mc", math.nan, t, rep.value, null.value) + (math.nan,) * 7)
    if "spectral" in sources:
        if cfg.grid is None:
            raise ValueError("a spectral reflection check needs a 'grid' block")
        grid = cfg.grid.build()
        rho0 = _initial_density(cfg, grid, params.x0)
        times = cfg.spectral.density_times or [t]
        f_p = spectral.densities_from_modes(grid, params, times, rho0)
        f_m = spectral.densities_from_modes(grid, flipped, times, rho0)
        for a, b in zip(f_p, f_m):
            diff = float(np.max(np.abs(a.values - b.values)))
            sweep.reports.append(ComparisonReport(
                f"{cfg.experiment}/spectral/reflection", "l1_density", diff, th.pointwise,
                metadata={"t": a.t, "norm": "max pointwise difference", "peak": float(np.max(np.abs(a.values)))}))
            sweep.rows.append(("spectral", math.nan, a.t, diff, math.nan) + (math.nan,) * 7)
    return sweep


def run_sweep(cfg: ExperimentConfig, threads=None) -> RunResult:
    """Regime (epsilon) sweep or v0-reflection check, per ``cfg.sweep``."""
    if cfg.sweep.kind == "regime":
        if cfg.regime is None:
            raise ValueError("a regime sweep needs a 'regime' block")
        sweep = _regime_sweep(cfg, cfg.sweep.sources, threads)
    else:
        sweep = _reflection_sweep(cfg, cfg.sweep.sources, threads)
    out = _out_dir(cfg)
    result = RunResult(reports=sweep.reports)
    result.files.append(_write_csv(out / "sweep.csv", _SWEEP_HEADER, sweep.rows))
    _finish_reports(cfg, result)
    _write_manifest(cfg, "sweep", result)
    return result

