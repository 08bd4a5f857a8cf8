"""Bias-surface study: DGP moments, grid evaluation, saddle geometry, CSV round-trip."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from pbrdr import (
    ConfigError,
    SurfaceDgp,
    evaluate_surface,
    export_surface,
    read_surface,
    rescale_bias,
    surface_dataset,
    target_mean,
)
from pbrdr.bias_surface import fit_scalar_calibration, fit_scalar_logistic_mle


def test_surface_dataset_first_moment():
    # E[X] = 2 since E[V] = 1
    data = surface_dataset(SurfaceDgp("fig1", 1_000_000, 0))
    x = data.x[:, 0]
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean() - 2.0) < 3 * se


def test_surface_dataset_treated_fraction():
    # direct Monte Carlo oracle of E[expit(-1 + X^2)]
    rng = np.random.default_rng(123)
    x_oracle = 3.0 - rng.gamma(1.0, 1.0, size=2_000_000)
    target = float(np.mean(expit(-1.0 + x_oracle**2)))
    data = surface_dataset(SurfaceDgp("fig1", 400_000, 1))
    se = math.sqrt(target * (1 - target) / data.n)
    assert abs(data.a.mean() - target) < 4 * se


def test_surface_dataset_deterministic():
    d1 = surface_dataset(SurfaceDgp("fig2", 1000, 5))
    d2 = surface_dataset(SurfaceDgp("fig2", 1000, 5))
    assert np.array_equal(d1.y, d2.y) and np.array_equal(d1.a, d2.a)


def test_target_mean_oracle_vs_closed_forms():
    # E[X^2] = 5 and E[X^3 - X^2] = 7 for X = 3 - V, V ~ Gamma(1, 1)
    assert target_mean("fig1") == pytest.approx(5.0, abs=0.005)
    assert target_mean("fig2") == pytest.approx(7.0, abs=0.02)


def test_rescale_examples():
    assert rescale_bias(4.0) == pytest.approx(2.0)
    assert rescale_bias(-9.0) == pytest.approx(-3.0)
    assert rescale_bias(0.0) == 0.0


@given(st.floats(min_value=-1e6, max_value=1e6), st.floats(min_value=-1e6, max_value=1e6))
def test_rescale_sign_preserving_and_monotone(a, b):
    ra, rb = rescale_bias(a), rescale_bias(b)
    assert np.sign(ra) == np.sign(a)
    if abs(a) < abs(b):
        assert abs(ra) <= abs(rb)


def test_scalar_fits_satisfy_score_equations():
    data = surface_dataset(SurfaceDgp("fig1", 30_000, 3))
    x = data.x[:, 0]
    a = data.a
    g_cal = fit_scalar_calibration(x, a)
    pi = expit(g_cal * x)
    assert np.mean((1.0 - a / pi) * x) == pytest.approx(0.0, abs=1e-9)
    g_mle = fit_scalar_logistic_mle(x, a)
    pi_mle = expit(g_mle * x)
    assert np.mean((a - pi_mle) * x) == pytest.approx(0.0, abs=1e-9)


def test_surface_values_match_direct_plugin():
    # each grid value equals the DR plug-in computed by direct summation
    dgp = SurfaceDgp("fig1", 20_000, 2)
    gammas = [0.4, 0.8]
    betas = [-3.0, 0.0, 2.0]
    grid = evaluate_surface(dgp, gammas, betas)
    data = surface_dataset(dgp)
    mu0 = target_mean("fig1")
    x = data.x[:, 0]
    for i, gs in enumerate(gammas):
        pi = expit(gs * x)
        for j, bs in enumerate(betas):
            m = bs * x
            u = np.where(data.a == 1.0, m + (data.y - m) / pi, m)
            raw = float(np.mean(u)) - mu0
            assert grid.rescaled_bias[i, j] == pytest.approx(rescale_bias(raw), abs=1e-10)


def test_surface_br_point_is_saddle():
    # the raw bias around the bias-reduced point: exactly flat along the
    # outcome-slope axis, curved along the propensity-slope axis, and the
    # second-difference Hessian has negative determinant (saddle geometry)
    dgp = SurfaceDgp("fig1", 50_000, 1)
    probe = evaluate_surface(dgp, [0.0], [0.0])
    g0, b0 = probe.br_point
    h_g, h_b = 0.08, 2.0
    gammas = [g0 - h_g, g0, g0 + h_g]
    betas = [b0 - h_b, b0, b0 + h_b]
    grid = evaluate_surface(dgp, gammas, betas)
    raw = np.sign(grid.rescaled_bias) * grid.rescaled_bias**2  # undo the rescale
    assert np.all(np.isfinite(raw))
    center = raw[1, 1]
    assert center == pytest.approx(grid.reference_biases["BR"], abs=1e-6)
    d2_gamma = raw[2, 1] - 2 * center + raw[0, 1]
    d2_beta = raw[1, 2] - 2 * center + raw[1, 0]
    cross = (raw[2, 2] - raw[2, 0] - raw[0, 2] + raw[0, 0]) / 4.0
    # beta axis flat (the plug-in mean is affine in the outcome slope with a
    # vanishing coefficient at the calibration solution)
    assert abs(raw[1, 2] - raw[1, 0]) < 1e-6
    assert abs(d2_beta) < 1e-6
    # gamma axis genuinely curved, and the determinant is negative
    assert abs(d2_gamma) > 1e-4
    det = d2_gamma * d2_beta - cross**2
    assert det < 0.0
    assert abs(cross) > 1e-4


def test_surface_reference_bias_ordering():
    # bias-reduced solution beats the MLE-based DR and inverse weighting,
    # majority vote over three seeds
    for variant in ("fig1", "fig2"):
        wins_mle = wins_ipw = 0
        for seed in (0, 1, 2):
            grid = evaluate_surface(SurfaceDgp(variant, 100_000, seed), [0.0], [0.0])
            refs = grid.reference_biases
            if abs(refs["BR"]) < abs(refs["MLE-DR"]):
                wins_mle += 1
            if abs(refs["BR"]) < abs(refs["IPW"]):
                wins_ipw += 1
        assert wins_mle >= 2 and wins_ipw >= 2


def test_positivity_marks_cells_not_fatal():
    # a very steep propensity slope sends some treated fitted values below the
    # guard: the row is NaN, other rows still evaluated
    dgp = SurfaceDgp("fig1", 20_000, 4)
    grid = evaluate_surface(dgp, [8.0, 0.5], [0.0])
    assert math.isnan(grid.rescaled_bias[0, 0])
    assert math.isfinite(grid.rescaled_bias[1, 0])


def test_grid_validation():
    dgp = SurfaceDgp("fig1", 1000, 0)
    with pytest.raises(ConfigError):
        evaluate_surface(dgp, [], [0.0])
    with pytest.raises(ConfigError):
        evaluate_surface(dgp, [0.0], [math.inf])
    with pytest.raises(ConfigError):
        SurfaceDgp("fig3", 1000, 0)


def test_export_roundtrip(tmp_path):
    grid = evaluate_surface(SurfaceDgp("fig2", 5_000, 7), [0.1, 0.9], [-2.0, 1.0])
    main_path, sidecar = export_surface(grid, tmp_path / "surface.csv")
    text = main_path.read_text()
    lines = text.strip().split("\n")
    assert lines[0] == "gamma_slope,beta_slope,rescaled_bias"
    assert len(lines) == 1 + 4  # 2x2 grid
    side_lines = sidecar.read_text().strip().split("\n")
    tags = [ln.split(",")[0] for ln in side_lines[1:]]
    assert tags == ["BR", "MLE-DR", "IPW", "IMP", "br_point_gamma", "br_point_beta"]
    assert len([t for t in tags if not t.startswith("br_point")]) == 4
    back = read_surface(main_path)
    assert np.array_equal(back.gamma_slopes, grid.gamma_slopes)
    assert np.array_equal(back.beta_slopes, grid.beta_slopes)
    assert np.array_equal(back.rescaled_bias, grid.rescaled_bias)
    assert back.br_point == grid.br_point
    assert back.reference_biases == grid.reference_biases
