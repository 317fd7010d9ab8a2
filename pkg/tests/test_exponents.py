"""Cgf routes, root finding, cycle-moment exponent estimation."""

import math
import warnings

import numpy as np
import pytest
from scipy.optimize import brentq

import markov_ruin as mr
from markov_ruin import (
    EffectiveSampleCollapse,
    EffectiveSampleCollapseWarning,
    NoPositiveRoot,
    NoUpperBracket,
    PowerIterationStall,
    TruncationDominance,
    Unsupported,
)


# -- closed forms -----------------------------------------------------------


def test_analytic_iid_quadratic(iid_crit):
    for a in (0.0, 0.7, 2.5, 4.0):
        assert mr.cgf_analytic(iid_crit, a) == -0.05 * a + 0.5 * 0.04 * a * a
    assert mr.cgf_analytic(iid_crit, 2.5) == 0.0


def test_analytic_ar1_long_run_variance(ar1_model):
    # partial sums of the stationary AR(1) have long-run sd 0.4/(1-0.5)
    lr = 0.8
    for a in (0.5, 1.0, 2.0):
        assert mr.cgf_analytic(ar1_model, a) == pytest.approx(
            -0.32 * a + 0.5 * lr * lr * a * a, abs=1e-15
        )


def test_analytic_unsupported(regime2):
    with pytest.raises(Unsupported):
        mr.cgf_analytic(regime2, 1.0)


def test_solve_exponent_iid_exact(iid_crit):
    sol = mr.solve_exponent(lambda a: (mr.cgf_analytic(iid_crit, a), 0.0))
    assert sol.residual <= 1e-10
    assert sol.exponent == pytest.approx(2.5, abs=1e-8)


def test_solve_exponent_ar1_exact(ar1_model):
    sol = mr.solve_exponent(lambda a: (mr.cgf_analytic(ar1_model, a), 0.0))
    assert sol.exponent == pytest.approx(1.0, abs=1e-8)


def test_no_positive_root():
    bad = mr.make_model("iid_lognormal", m=-0.05, sigma_sq=0.04)
    with pytest.raises(NoPositiveRoot):
        mr.solve_exponent(lambda a: (mr.cgf_analytic(bad, a), 0.0))


def test_no_upper_bracket():
    # deterministic subcritical discount: cgf = -0.2 a stays negative
    flat = mr.make_model("iid_lognormal", m=0.2, sigma_sq=0.0)
    with pytest.raises(NoUpperBracket):
        mr.solve_exponent(lambda a: (mr.cgf_analytic(flat, a), 0.0))


# -- spectral route ------------------------------------------------------------


def test_moment_matrix_entries(regime2):
    a = 1.3
    M = mr.moment_matrix(regime2, a)
    P = np.array([[0.9, 0.1], [0.1, 0.9]])
    ea = np.exp([-0.06 * a + 0.5 * 0.01 * a * a, 0.02 * a + 0.5 * 0.09 * a * a])
    assert np.allclose(M, P * ea[None, :], rtol=1e-14)


def test_moment_matrix_needs_finite(iid_crit):
    with pytest.raises(Unsupported):
        mr.moment_matrix(iid_crit, 1.0)


def test_spectral_zero_at_origin(regime2):
    assert abs(mr.cgf_spectral(regime2, 0.0)) <= 1e-12


def test_spectral_root_against_closed_form_eigenvalue(regime2):
    # independent route: 2x2 dominant eigenvalue in closed form, root by
    # brentq; the package uses power iteration plus bisection
    P = np.array([[0.9, 0.1], [0.1, 0.9]])
    mus, sigmas = (0.06, -0.02), (0.1, 0.3)

    def rho(alpha):
        ea = np.exp(
            [-mus[j] * alpha + 0.5 * sigmas[j] ** 2 * alpha ** 2 for j in range(2)]
        )
        M = P * ea[None, :]
        tr = M[0, 0] + M[1, 1]
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        return (tr + math.sqrt(tr * tr - 4.0 * det)) / 2.0

    oracle = brentq(lambda a: math.log(rho(a)), 1e-3, 50.0, xtol=1e-13)
    assert oracle == pytest.approx(0.5478455134660553, abs=1e-10)
    sol = mr.solve_exponent(lambda a: (mr.cgf_spectral(regime2, a), 0.0))
    assert sol.exponent == pytest.approx(oracle, abs=1e-7)


def test_power_iteration_stall_on_periodic_chain():
    per = mr.make_model(
        "regime_switch_lognormal",
        transition=[[0.0, 1.0], [1.0, 0.0]],
        mus=[0.06, -0.02],
        sigmas=[0.1, 0.3],
    )
    with pytest.raises(PowerIterationStall):
        mr.cgf_spectral(per, 1.0)


# -- kernel discretization --------------------------------------------------------


def test_kernel_matches_analytic_ar1(ar1_model):
    for a in (0.5, 1.25):
        assert mr.cgf_discretized_kernel(ar1_model, a) == pytest.approx(
            mr.cgf_analytic(ar1_model, a), abs=1e-3
        )


def test_kernel_matches_analytic_iid(iid_crit):
    assert mr.cgf_discretized_kernel(iid_crit, 1.3) == pytest.approx(
        mr.cgf_analytic(iid_crit, 1.3), abs=1e-12
    )


def test_kernel_truncation_dominance_detected():
    # stationary sd 3/sqrt(1-0.81) = 6.9 overwhelms the [-12, 12] window
    wide = mr.make_model("ar1_log_return", c=0.9, mu=0.5, innovation_sd=3.0)
    with pytest.raises(TruncationDominance):
        mr.cgf_discretized_kernel(wide, 1.0)


def test_kernel_unsupported_kind(regime2):
    with pytest.raises(Unsupported):
        mr.cgf_discretized_kernel(regime2, 1.0)


# -- simulation route ---------------------------------------------------------------


def test_mc_zero_at_origin(iid_crit):
    v, se = mr.cgf_mc(iid_crit, 0.0, n=50, n_paths=2000, seed=5)
    assert v == 0.0
    assert se == 0.0


def test_mc_matches_analytic_within_errors(iid_crit):
    v, se = mr.cgf_mc(iid_crit, 1.0, n=100, n_paths=40000, seed=7)
    assert se > 0.0
    assert abs(v - mr.cgf_analytic(iid_crit, 1.0)) < 4.0 * se + 1e-4


def test_mc_collapse_warns_but_returns(iid_crit):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        v, se = mr.cgf_mc(iid_crit, 60.0, n=50, n_paths=2000, seed=5)
    assert any(
        isinstance(w.message, EffectiveSampleCollapseWarning) for w in caught
    )
    assert np.isfinite(v)


def test_truncated_sums_dominate_pathwise(iid_crit):
    # flooring per-step log discounts at -M raises every path sum, and a
    # tighter floor raises them further; same seed, same draws
    s_tight = mr.mc_log_discount_sums(iid_crit, 50, 500, seed=3, truncation_M=0.1)
    s_loose = mr.mc_log_discount_sums(iid_crit, 50, 500, seed=3, truncation_M=10.0)
    s_plain = mr.mc_log_discount_sums(iid_crit, 50, 500, seed=3)
    assert np.all(s_tight >= s_loose)
    assert np.all(s_loose >= s_plain)


def test_mc_stability_diagnostic(iid_crit):
    out = mr.mc_stability_diagnostic(iid_crit, 0.8, n=50, n_paths=20000, seed=11)
    assert out["stable"]
    assert out["pooled_se"] > 0.0


# -- cgf factories and grids -----------------------------------------------------


def test_make_cgf_auto_routes(iid_crit, regime2):
    assert mr.make_cgf(iid_crit).method == "analytic"
    assert mr.make_cgf(regime2).method == "spectral"
    sv = mr.make_model("sv_mixed", vol_c=0.7, vol_sd=0.3, frac_bank=0.4, rate=0.04)
    assert mr.make_cgf(sv, n_paths=100, n=10).method == "monte_carlo"


def test_make_cgf_mc_is_frozen_surface(iid_crit):
    fn = mr.make_cgf(iid_crit, "monte_carlo", n=50, n_paths=2000, seed=9)
    assert fn(0.8) == fn(0.8)
    assert fn.path_sums.shape == (2000,)
    assert fn.n_steps == 50


def test_make_cgf_rejects_unknown(iid_crit):
    with pytest.raises(ValueError):
        mr.make_cgf(iid_crit, "tea_leaves")
    with pytest.raises(TypeError):
        mr.make_cgf(iid_crit, "monte_carlo", n=10, n_paths=100, bogus=1)


def test_estimate_cgf_grid(iid_crit):
    grid = np.linspace(0.0, 3.0, 7)
    est = mr.estimate_cgf(iid_crit, grid, method="analytic")
    assert est.method == "analytic"
    assert est.lambda_values[0] == 0.0
    assert np.all(est.std_errors == 0.0)
    # exact quadratic: discrete second differences are constant positive
    assert est.convexity_margin() == pytest.approx(0.04 * 0.25, rel=1e-10)


def test_convexity_margin_flags_concavity():
    est = mr.CgfEstimate(
        alpha_grid=np.array([0.0, 1.0, 2.0]),
        lambda_values=np.array([0.0, 1.0, 1.5]),
        std_errors=np.zeros(3),
        method="analytic",
    )
    assert est.convexity_margin() == pytest.approx(-0.5)


def test_mc_empirical_cgf_is_convex(iid_crit):
    # log-sum-exp of linear functions of alpha is convex regardless of the
    # sample, so the frozen-path surface must show a nonnegative margin
    # even out where the tilt collapses (hence the suppressed warning)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EffectiveSampleCollapseWarning)
        est = mr.estimate_cgf(
            iid_crit, np.linspace(0.0, 3.0, 9), method="monte_carlo",
            n=50, n_paths=5000, seed=3,
        )
    assert est.convexity_margin() >= -1e-12


# -- cycle-moment route ---------------------------------------------------------------


def test_eta_cycles_brackets_true_root(iid_crit):
    cert = mr.minorize_model(iid_crit)
    bl = mr.sample_blocks(iid_crit, cert, 20000, seed=13)
    sol = mr.solve_eta_cycles(bl, seed=1)
    lo, hi = sol.ci
    assert lo < 2.5 < hi
    assert sol.std_error > 0.0
    assert sol.method == "cycle_moment"


def test_eta_cycles_rejects_initial(iid_crit):
    cert = mr.minorize_model(iid_crit)
    bl = mr.sample_blocks(iid_crit, cert, 500, seed=2, initial=True, x0=0.5)
    with pytest.raises(ValueError):
        mr.solve_eta_cycles(bl)


def test_eta_cycles_collapse_at_wild_bracket(iid_crit):
    cert = mr.minorize_model(iid_crit)
    bl = mr.sample_blocks(iid_crit, cert, 20000, seed=13)
    with pytest.raises(EffectiveSampleCollapse):
        mr.solve_eta_cycles(bl, alpha_bracket=(0.1, 500.0), seed=1)


def test_eta_cycles_no_positive_root():
    # growing discounts: empirical mean A^a exceeds 1 for every a > 0
    grow = mr.make_model("iid_lognormal", m=-0.3, sigma_sq=0.01)
    cert = mr.minorize_model(grow)
    bl = mr.sample_blocks(grow, cert, 2000, seed=4)
    with pytest.raises(NoPositiveRoot):
        mr.solve_eta_cycles(bl, seed=1)
