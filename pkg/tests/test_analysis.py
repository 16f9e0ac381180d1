import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg, stats

from ortholangevin.analysis import (
    ComparisonReport,
    HistogramBinning,
    bin_masses,
    density_l1_compare,
    empirical_char_fn,
    ensemble_l1_compare,
    l1_noise_floor,
    mean_position,
    moment_report,
    read_reports_jsonl,
    speed_bias,
    sup_cf_error,
    summary_table,
    variance_ratio,
    write_reports_jsonl,
)
from ortholangevin.core import Constant, General, ModelParams, piecewise_linear
from ortholangevin.errors import SparseHistogram, TimeNotSampled
from ortholangevin.sde import Ensemble, IntegratorScheme, simulate_ensemble
from ortholangevin.spectral import SpectralGrid, densities_from_modes, gaussian_density

ZERO = piecewise_linear([0.0], [0.0])
FREE = ModelParams(General(ZERO, ZERO), [1, 0.5, -0.2], x0=[0.1, 0, 0.3])
UNIT = ModelParams(Constant(1, 1), [1, 0, 0])
SCHEME = IntegratorScheme("speed_projected", 0.01)


def synthetic(points, params=UNIT):
    """Single-time ensemble holding the given positions."""
    points = np.asarray(points, dtype=float)
    vel = np.tile(params.v0, (points.shape[0], 1, 1))
    return Ensemble(params, SCHEME, 0, np.array([0.0]), points[:, None, :], vel)


@pytest.fixture(scope="module")
def free_ens():
    return simulate_ensemble(FREE, SCHEME, 200, [0, 0.5, 1.0], 5)


# -- characteristic function -----------------------------------------------------------


def test_cf_at_zero_wavevector(free_ens):
    cf = empirical_char_fn(free_ens, [0, 0, 0], 1.0)
    assert cf.estimate == 1 and cf.std_error == 0 and cf.n == 200


def test_cf_of_free_flight_is_exact(free_ens):
    lam = np.array([1.0, -2.0, 0.5])
    for t in (0.5, 1.0):
        cf = empirical_char_fn(free_ens, lam, t)
        assert abs(cf.estimate - np.exp(1j * lam @ (FREE.x0 + FREE.v0 * t))) < 1e-12
        assert cf.std_error < 1e-12
    rep = sup_cf_error(free_ens, {((1.0, -2.0, 0.5), 1.0): np.exp(1j * lam @ (FREE.x0 + FREE.v0))})
    assert rep.passed and rep.metadata["quantity"] == "max z over 1 cells"


def test_cf_jackknife_error_is_calibrated(rng):
    lam = np.array([0.8, 0.3, -0.5])
    exact = math.exp(-0.5 * lam @ lam)
    z = []
    for _ in range(300):
        cf = empirical_char_fn(synthetic(rng.normal(size=(500, 3))), lam, 0.0)
        z.append(abs(cf.estimate - exact) / cf.std_error)
    # |complex error| / se is Rayleigh-like with unit second moment
    assert np.mean(np.square(z)) == pytest.approx(1, abs=0.15)


def test_cf_error_shrinks_like_inverse_root_n(rng):
    lam = np.array([1.0, 0, 0])
    exact = math.exp(-0.5)
    sizes = np.array([250, 1000, 4000, 16000])
    err = [np.sqrt(np.mean([abs(empirical_char_fn(synthetic(rng.normal(size=(n, 3))), lam, 0.0).estimate - exact) ** 2
                            for _ in range(60)])) for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(err), 1)[0]
    assert abs(slope + 0.5) <= 0.1


def test_unsampled_time(free_ens):
    with pytest.raises(TimeNotSampled):
        empirical_char_fn(free_ens, [1, 0, 0], 0.25)


# -- moments ---------------------------------------------------------------------------


def _mean_oracle(a, H, v0, x0, t):
    """Matrix exponential of the linear system (x, m)' = (m, -a m + m x H)."""
    hx = np.array([[0, -H[2], H[1]], [H[2], 0, -H[0]], [-H[1], H[0], 0]])
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    A[3:, 3:] = -a * np.eye(3) - hx
    return (linalg.expm(A * t) @ np.concatenate([x0, v0]))[:3]


@given(a=st.floats(0.1, 3), t=st.floats(0, 4),
       H=st.tuples(*[st.floats(-2, 2)] * 3), v0=st.tuples(*[st.floats(-2, 2)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1))
def test_mean_position_matches_matrix_exponential(a, t, H, v0):
    p = ModelParams(Constant(a, 1.0), v0, x0=[0.3, -0.1, 0.2], H=H)
    np.testing.assert_allclose(mean_position(p, t), _mean_oracle(a, np.array(H), p.v0, p.x0, t), atol=1e-9)


def test_moments_at_time_zero():
    ens = simulate_ensemble(UNIT, SCHEME, 100, [0, 0.5], 1)
    reports = moment_report(ens, 0.0)
    # the position is deterministic; the velocity is not yet isotropic
    assert all(r.value == 0 and r.passed for r in reports[3:])
    assert not reports[0].passed and reports[0].value > 1e9


def test_moments_at_equilibrium():
    p = ModelParams(Constant(1, 1), [0, 1, 0])
    ens = simulate_ensemble(p, SCHEME, 20_000, [0, 3.0], 12)
    reports = moment_report(ens, 3.0)
    assert len(reports) == 6
    assert all(r.passed for r in reports), summary_table(reports)


def test_variance_ratio_of_known_gaussian(rng):
    x = rng.normal(size=(40_000, 3)) * [math.sqrt(2), 1, 1]
    ratio, se = variance_ratio(synthetic(x), 0.0)
    assert abs(ratio - 2) <= 3 * se
    assert se == pytest.approx(2 * math.sqrt(3 / 40_000), rel=0.1)  # delta method for chi-square ratios
    ratio_y, _ = variance_ratio(synthetic(x), 0.0, direction=[0, 1, 0])
    assert ratio_y == pytest.approx(2 / 3, rel=0.05)


def test_speed_bias_control_variate():
    p = ModelParams(Constant(1, 1), [2, 0, 0])
    ens = simulate_ensemble(p, IntegratorScheme("euler_maruyama", 0.01), 2000, [0, 1.0], 3)
    exact = (1 - 0.01) ** 200 * 4 + sum((1 - 0.01) ** (2 * k) * 2 * 0.01 for k in range(100))
    # Euler's own recursion for E|v|^2 is exact, so the residual is rounding only
    bias, se = speed_bias(ens, 1.0, exact=exact)
    assert abs(bias) < 1e-12 and se < 1e-12


# -- histograms ------------------------------------------------------------------------


def test_binning_validation():
    with pytest.raises(ValueError):
        HistogramBinning((0, 0, 0), (1, 1, 1), 7)
    with pytest.raises(ValueError):
        HistogramBinning((0, 0, 0), (1, 0, 1), 8)
    b = HistogramBinning.centred([1, 0, 0], 2.0, 8)
    assert b.lower == (-1.0, -2.0, -2.0) and b.bins == (8, 8, 8)


def test_gaussian_bin_masses_against_cdf():
    b = HistogramBinning.centred(0, 3.0, (8, 9, 10))
    cov = np.diag([0.5, 1.0, 2.0])
    got = bin_masses(lambda p: gaussian_density(p, np.zeros(3), cov), b)
    axes = [np.diff(stats.norm.cdf(e, scale=math.sqrt(cov[i, i]))) for i, e in enumerate(b.edges())]
    np.testing.assert_allclose(got, np.einsum("i,j,k->ijk", *axes), atol=2e-6)


def test_field_masses_tile_the_grid():
    g = SpectralGrid.from_extent(16, 8.0)
    rho = g.sample(lambda p: gaussian_density(p, np.zeros(3), 0.5 * np.eye(3)))
    rho /= g.integrate(rho)
    fld = densities_from_modes(g, UNIT, [0], rho)[0]
    masses = bin_masses(fld, HistogramBinning.for_grid(g, 2))
    assert masses.shape == (8, 8, 8) and masses.sum() == pytest.approx(1, abs=1e-12)
    with pytest.raises(ValueError):
        bin_masses(fld, HistogramBinning.centred(0, 4.0, 8))


def test_histogram_against_its_own_frequencies(rng):
    ens = synthetic(rng.normal(size=(5000, 3)))
    b = HistogramBinning.centred(0, 4.0, 8)
    rep = density_l1_compare(ens, 0.0, b.counts(ens.positions_at(0)) / 5000, b)
    assert rep.value == pytest.approx(0, abs=1e-12) and rep.passed
    assert ensemble_l1_compare(ens, ens, 0.0, b).value == 0


def test_free_flight_point_mass_and_wrong_translate(free_ens):
    b = HistogramBinning.centred(FREE.x0 + FREE.v0, 0.9, 9)
    right = np.zeros(b.bins)
    right[4, 4, 4] = 1.0
    assert density_l1_compare(free_ens, 1.0, right, b).value == 0
    wrong = np.zeros(b.bins)
    wrong[0, 4, 4] = 1.0
    rep = density_l1_compare(free_ens, 1.0, wrong, b)
    assert rep.value == pytest.approx(2) and not rep.passed


def test_noise_floor_predicts_multinomial_l1(rng):
    p = rng.dirichlet(np.ones(512))
    n = 20_000
    l1 = [np.abs(rng.multinomial(n, p) / n - p).sum() for _ in range(200)]
    assert np.mean(l1) == pytest.approx(l1_noise_floor(p, n), rel=0.05)


def test_chi_square_pooling(rng):
    b = HistogramBinning.centred(0, 4.0, 16)
    ens = synthetic(rng.normal(size=(20_000, 3)))
    rep = density_l1_compare(ens, 0.0, lambda p: gaussian_density(p, np.zeros(3), np.eye(3)), b)
    # tail bins are pooled into one extra cell
    assert 0 < rep.metadata["qualifying_bins"] < 16**3
    assert rep.metadata["dof"] == rep.metadata["qualifying_bins"]
    assert rep.metadata["p_value"] > 1e-3


def test_chi_square_detects_wrong_shape(rng):
    b = HistogramBinning((0, 0, 0), (1, 1, 1), 8)
    uniform = np.full(b.bins, 1 / 512)
    tilted = uniform.copy()
    tilted[:4] *= 1.5
    tilted[4:] *= 0.5
    big = synthetic(rng.uniform(0, 1, size=(20_000, 3)))
    ok, bad = density_l1_compare(big, 0.0, uniform, b), density_l1_compare(big, 0.0, tilted, b)
    assert ok.metadata["p_value"] > 1e-3 and bad.metadata["p_value"] < 1e-6
    assert ok.metadata["qualifying_bins"] == 512


def test_sparse_histogram_raises(rng):
    ens = synthetic(rng.uniform(0, 1, size=(1000, 3)))
    with pytest.raises(SparseHistogram):
        density_l1_compare(ens, 0.0, np.full((8, 8, 8), 1 / 512), HistogramBinning((0, 0, 0), (1, 1, 1), 8))


# -- reports -----------------------------------------------------------------------------


def test_verdict_semantics():
    assert ComparisonReport("e", "moment_z_scores", -2.9, 3.0).passed
    assert not ComparisonReport("e", "variance_ratio", -3.1, 3.0).passed
    assert ComparisonReport("e", "l1_density", 0.1, 0.1).passed
    assert not ComparisonReport("e", "sup_cf_error", math.inf, 3.0).passed


def test_jsonl_roundtrip(tmp_path, free_ens):
    reports = moment_report(free_ens, 1.0, "free") + [
        sup_cf_error(free_ens, {((1.0, 0.0, 0.0), 0.5): 1.0 + 0j}, "free")]
    back = read_reports_jsonl(write_reports_jsonl(reports, tmp_path / "r.jsonl"))
    assert [(r.metric, r.value, r.verdict) for r in back] == [(r.metric, r.value, r.verdict) for r in reports]
    table = summary_table(back)
    assert "mean x1" in table and "max z over 1 cells" in table
