"""End-to-end runs at production scale, one test per headline claim.

Each test prints its key measurements and asserts a wall clock budget,
so a slow regression fails as loudly as a wrong number.  Scales and
seeds are fixed; every number asserted here was pinned down on this
exact configuration.
"""

import json
import math
import os
import time

import numpy as np
import pytest

import markov_ruin as mr
from markov_ruin import cli


@pytest.fixture(scope="module")
def loss_tail_samples(iid_crit_losses):
    # one million supremum draws, shared by the curve and constant tests
    return mr.sample_w_sup(iid_crit_losses, 1_000_000, seed=41, horizon=10_000)


def test_block_ledger_reconstructs_discounted_sums(ar1_model, ar1_cert):
    """Carving blocks and rebuilding W must be exact, path by path."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    traces = mr.simulate_split_paths(ar1_model, ar1_cert, None, 200, 1000, rng)
    worst = 0.0
    for tr in traces:
        blocks, rem = mr.carve_blocks(tr)
        w = mr.blocks_to_w(blocks, rem)
        cum = np.cumsum(tr.log_a)
        direct = float(tr.b[0] + np.sum(np.exp(cum[:-1]) * tr.b[1:]))
        worst = max(worst, abs(w - direct) / max(1e-12, abs(direct)))
    elapsed = time.perf_counter() - t0
    print(f"[blocks] 1000 paths, worst rel err {worst:.3e}, {elapsed:.1f}s")
    assert elapsed < 10.0
    assert worst <= 1e-9


def test_iid_exponent_closed_form_and_cycle_estimate(iid_crit_losses):
    """Root of the quadratic cgf, then the same number from cycles."""
    t0 = time.perf_counter()
    sol = mr.solve_exponent(lambda a: (mr.cgf_analytic(iid_crit_losses, a), 0.0))
    cert = mr.minorize_model(iid_crit_losses)
    bl = mr.sample_blocks(iid_crit_losses, cert, 100_000, seed=202)
    eta = mr.solve_eta_cycles(bl, seed=203)
    lo, hi = eta.ci
    elapsed = time.perf_counter() - t0
    print(f"[iid exponent] root {sol.exponent:.12f} residual {sol.residual:.1e} "
          f"eta {eta.exponent:.4f} ci ({lo:.4f}, {hi:.4f}), {elapsed:.1f}s")
    assert elapsed < 60.0
    assert abs(sol.residual) <= 1e-10
    assert abs(sol.exponent - 2.5) <= 1e-9
    # iid chains regenerate on every step
    assert cert.delta_a == 1.0
    assert lo <= 2.5 <= hi


def test_regime_switch_exponent_three_routes(regime2):
    """Spectral root, cycle estimate, and the simulated cgf at the root."""
    t0 = time.perf_counter()
    sol = mr.solve_exponent(lambda a: (mr.cgf_spectral(regime2, a), 0.0))
    root = sol.exponent
    cert = mr.minorize_model(regime2)
    bl = mr.sample_blocks(regime2, cert, 100_000, seed=301)
    eta = mr.solve_eta_cycles(bl, seed=302)
    gap = abs(eta.exponent - root)
    # long horizon thins the surviving weight at this alpha, which the
    # estimator reports; the value is still unbiased enough for a zero test
    with pytest.warns(mr.EffectiveSampleCollapseWarning):
        v, se_mc = mr.cgf_mc(regime2, root, 400, 100_000, seed=303)
    elapsed = time.perf_counter() - t0
    print(f"[regime exponent] spectral {root:.6f} eta {eta.exponent:.5f} "
          f"(se {eta.std_error:.5f}) gap {gap:.4f}; "
          f"cgf_mc at root {v:.2e} (se {se_mc:.2e}), {elapsed:.1f}s")
    assert elapsed < 300.0
    assert gap <= 2.0 * eta.std_error
    assert abs(v) <= 2.0 * se_mc


def test_garch_unit_root_three_routes(garch_kesten):
    """Closed form, Hill on stationary draws, and cycles all give 1."""
    t0 = time.perf_counter()
    sol = mr.solve_exponent(lambda a: (mr.cgf_analytic(garch_kesten, a), 0.0))
    draws = mr.sample_garch_stationary(garch_kesten, 1_000_000, seed=404,
                                       burn_in=2000)
    hill = mr.hill_estimator(draws.samples, 2000)
    cert = mr.minorize_model(garch_kesten)
    bl = mr.sample_blocks(garch_kesten, cert, 100_000, seed=405)
    eta = mr.solve_eta_cycles(bl, seed=406)
    lo, hi = eta.ci
    elapsed = time.perf_counter() - t0
    print(f"[garch root] analytic {sol.exponent:.10f} hill {hill.index:.4f} "
          f"eta {eta.exponent:.5f} ci ({lo:.4f}, {hi:.4f}), {elapsed:.1f}s")
    assert elapsed < 300.0
    assert abs(sol.exponent - 1.0) <= 1e-6
    assert 0.85 <= hill.index <= 1.15
    assert lo <= 1.0 <= hi


def test_ruin_curve_slope_and_tail_level(loss_tail_samples):
    """Fitted slope matches the exponent; the compensated level should
    flatten over a decade.  The second clause is a genuine convergence
    question, not a bookkeeping one: at a million paths the reachable
    window still sits on the shoulder of u**2.5 * psi(u), which peaks
    near u = 5 and keeps falling toward its limit well past u = 30."""
    t0 = time.perf_counter()
    ws = loss_tail_samples
    curve = mr.curve_from_samples(ws.samples, horizon=ws.horizon)
    fit = mr.fit_power_tail(curve)
    u_lo = fit.u_window[0]
    grid = np.geomspace(u_lo, 10.0 * u_lo, 13)
    decade = mr.curve_from_samples(ws.samples, u_grid=grid, horizon=ws.horizon)
    pinned = mr.fit_power_tail(decade, exponent=2.5)
    elapsed = time.perf_counter() - t0
    print(f"[ruin curve] slope {fit.slope:.4f} over u in "
          f"({fit.u_window[0]:.2f}, {fit.u_window[1]:.2f}); "
          f"flatness of u^2.5*psi over ({grid[0]:.2f}, {grid[-1]:.2f}) "
          f"= {pinned.flatness:.3f}, {elapsed:.1f}s")
    assert elapsed < 600.0
    assert -2.65 <= fit.slope <= -2.35
    assert pinned.flatness <= 0.35, (
        f"u^2.5 * psi_hat is still bending over ({grid[0]:.2f}, {grid[-1]:.2f}): "
        f"flatness {pinned.flatness:.3f}; the compensated level has not "
        f"settled anywhere reachable with 1e6 paths (it is still falling "
        f"at u ~ 30 and levels off only past u ~ 60)"
    )


def test_split_chain_marginal_laws_match():
    """Splitting must not disturb the chain's marginal law."""
    t0 = time.perf_counter()
    model = mr.make_model("ar1_log_return", c=0.5, mu=2.0, innovation_sd=1.0)
    cert = mr.minorize_model(model)
    res = mr.split_marginal_check(model, cert, 50, 100_000,
                                  np.random.default_rng(42), n_regen=10_000)
    elapsed = time.perf_counter() - t0
    print(f"[split check] endpoint p {res['endpoint_pvalue']:.4f} "
          f"regeneration p {res['regen_pvalue']:.4f}, {elapsed:.1f}s")
    assert elapsed < 120.0
    assert res["endpoint_pvalue"] > 0.01
    assert res["regen_pvalue"] > 0.01


def test_quadrature_cgf_matches_closed_form():
    """Discretized kernel route against the exact quadratic cgf."""
    t0 = time.perf_counter()
    model = mr.make_model("ar1_log_return", c=0.5, mu=0.4, innovation_sd=0.4)
    sol = mr.solve_exponent(lambda a: (mr.cgf_analytic(model, a), 0.0))
    assert abs(sol.exponent - 1.25) <= 1e-9
    worst = 0.0
    for a in (0.5, 1.0, sol.exponent):
        v = mr.cgf_discretized_kernel(model, a, 12.0, 800)
        worst = max(worst, abs(v - mr.cgf_analytic(model, a)))
    elapsed = time.perf_counter() - t0
    print(f"[kernel cgf] worst |kernel - analytic| {worst:.3e}, {elapsed:.1f}s")
    assert elapsed < 30.0
    assert worst <= 1e-3


def test_tail_constant_two_routes(iid_crit_losses, loss_tail_samples):
    """Cycle-based constant versus the level of the window fit.  The
    estimator itself is stable (half samples agree), and it lands on the
    deep-tail level; the factor-two comparison fails because the fit
    window at a million paths reads the still-falling shoulder of the
    compensated curve, roughly five times the limiting level."""
    t0 = time.perf_counter()
    model = iid_crit_losses
    cert = mr.minorize_model(model)
    root = mr.solve_exponent(lambda a: (mr.cgf_analytic(model, a), 0.0)).exponent
    ws = loss_tail_samples

    bl = mr.sample_blocks(model, cert, 1_000_000, seed=81)
    init = mr.sample_blocks(model, cert, 200_000, seed=82, initial=True, x0=0.0)
    est = mr.estimate_goldie_constant(bl, ws.samples, root,
                                      initial_blocks=init, seed=83)

    h1 = mr.sample_blocks(model, cert, 500_000, seed=811)
    h2 = mr.sample_blocks(model, cert, 500_000, seed=812)
    e1 = mr.estimate_goldie_constant(h1, ws.samples[0::2], root, seed=84)
    e2 = mr.estimate_goldie_constant(h2, ws.samples[1::2], root, seed=85)
    width1 = (e1.ci_d[1] - e1.ci_d[0]) / 2.0
    width2 = (e2.ci_d[1] - e2.ci_d[0]) / 2.0

    curve = mr.curve_from_samples(ws.samples, horizon=ws.horizon)
    fit = mr.fit_power_tail(curve)

    # direct deep-tail readings of u^root * psi_hat for the record; the
    # cycle estimate agrees with these, not with the shallow fit window
    deep = {u: float(u ** root * np.mean(ws.samples > u)) for u in (20.0, 30.0)}
    elapsed = time.perf_counter() - t0
    print(f"[tail constant] d_hat {est.d_hat:.4f} ci ({est.ci_d[0]:.3f}, "
          f"{est.ci_d[1]:.3f}) c_hat {est.c_hat:.4f}; half samples "
          f"d1 {e1.d_hat:.4f} d2 {e2.d_hat:.4f}; window fit level "
          f"exp(log_c) {math.exp(fit.log_c):.4f}; deep levels {deep}, "
          f"{elapsed:.1f}s")
    assert elapsed < 600.0
    assert abs(e1.d_hat - e2.d_hat) <= width1 + width2
    gap = abs(math.log(est.c_hat) - fit.log_c)
    assert gap <= math.log(2.0), (
        f"window fit level {math.exp(fit.log_c):.3f} vs cycle estimate "
        f"{est.c_hat:.3f}: the fit window ({fit.u_window[0]:.2f}, "
        f"{fit.u_window[1]:.2f}) is preasymptotic at this scale, while the "
        f"cycle route already sits on the deep-tail level {deep}"
    )


def test_verify_battery_end_to_end(tmp_path):
    """The cli verify run must come back all green."""
    t0 = time.perf_counter()
    cfg = tmp_path / "verify.toml"
    cfg.write_text(
        'experiment = "verify"\n'
        "seed = 909\n"
        "\n"
        "[model]\n"
        'kind = "ar1_log_return"\n'
        "c = 0.5\n"
        "mu = 0.32\n"
        "innovation_sd = 0.4\n"
    )
    out = str(tmp_path / "out")
    code = cli.main(["verify", "--config", str(cfg), "--out", out])
    with open(os.path.join(out, "verify_report.json")) as fh:
        report = json.load(fh)
    names = {c["name"] for c in report["checks"]}
    n_pass = sum(1 for c in report["checks"] if c["pass"])
    elapsed = time.perf_counter() - t0
    print(f"[verify] exit {code}, {n_pass}/{len(report['checks'])} checks, "
          f"{elapsed:.1f}s")
    assert elapsed < 900.0
    assert code == 0
    assert report["all_pass"] is True
    assert any(n.startswith("cgf_convexity[") for n in names)
    assert any(n.startswith("cgf_zero[") for n in names)
    assert {"psi_monotone", "determinism", "scale_equivariance"} <= names
