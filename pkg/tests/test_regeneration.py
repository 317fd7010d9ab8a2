"""Split-chain simulation, block carving, reconstruction identities."""

import math

import numpy as np
import pytest

import markov_ruin as mr
from markov_ruin import CycleOverflow, Unsupported


def direct_partial_sum(trace):
    # W_n = b_1 + sum_{t>=2} exp(S_{t-1}) b_t, the plain-recursion value
    cum = np.cumsum(trace.log_a)
    return float(trace.b[0] + np.sum(np.exp(cum[:-1]) * trace.b[1:]))


# -- single-path machinery ----------------------------------------------------


def test_split_trace_records_regens(ar1_model, ar1_cert, rng):
    trace = mr.simulate_split_path(ar1_model, ar1_cert, None, 300, rng)
    assert len(trace) == 300
    assert trace.regen_times.size > 0
    assert trace.regen_times.min() >= 2
    assert np.all(np.diff(trace.regen_times) > 0)


def test_reconstruction_exact_single_path(ar1_model, ar1_cert, rng):
    trace = mr.simulate_split_path(ar1_model, ar1_cert, None, 200, rng)
    blocks, rem = mr.carve_blocks(trace)
    w = mr.blocks_to_w(blocks, rem)
    direct = direct_partial_sum(trace)
    assert w == pytest.approx(direct, rel=1e-12)


def test_reconstruction_exact_at_interior_time(ar1_model, ar1_cert, rng):
    trace = mr.simulate_split_path(ar1_model, ar1_cert, None, 200, rng)
    for upto in (1, 17, 100, 200):
        blocks, rem = mr.carve_blocks(trace, upto=upto)
        cum = np.cumsum(trace.log_a[:upto])
        direct = float(
            trace.b[0] + np.sum(np.exp(cum[:-1]) * trace.b[1:upto])
        )
        assert mr.blocks_to_w(blocks, rem) == pytest.approx(direct, rel=1e-12)


def test_carve_upto_validated(ar1_model, ar1_cert, rng):
    trace = mr.simulate_split_path(ar1_model, ar1_cert, None, 50, rng)
    with pytest.raises(ValueError):
        mr.carve_blocks(trace, upto=0)
    with pytest.raises(ValueError):
        mr.carve_blocks(trace, upto=51)


def test_blocks_to_w_ordering_rules(ar1_model, ar1_cert, rng):
    trace = mr.simulate_split_path(ar1_model, ar1_cert, None, 200, rng)
    blocks, rem = mr.carve_blocks(trace)
    assert blocks[0].is_initial
    with pytest.raises(ValueError):
        mr.blocks_to_w(blocks[1:], rem)
    with pytest.raises(ValueError):
        mr.blocks_to_w([blocks[0], blocks[0]], rem)


def test_carve_before_first_regen_is_remainder_only(ar1_model, ar1_cert, rng):
    trace = mr.simulate_split_path(ar1_model, ar1_cert, None, 200, rng)
    t0 = int(trace.regen_times[0])
    blocks, rem = mr.carve_blocks(trace, upto=t0 - 1)
    assert blocks == []
    cum = np.cumsum(trace.log_a[: t0 - 1])
    direct = float(trace.b[0] + np.sum(np.exp(cum[:-1]) * trace.b[1 : t0 - 1]))
    assert rem == pytest.approx(direct, rel=1e-12)


# -- batched block sampling -----------------------------------------------------


def test_iid_delta_one_blocks(iid_crit):
    cert = mr.minorize_model(iid_crit)
    bl = mr.sample_blocks(iid_crit, cert, 2000, seed=11)
    # delta = 1 regenerates every step: tau = 1 and the block collapses to
    # the single step, so the loss, the running max and the forward value
    # all equal B_1
    assert np.all(bl.tau == 1)
    assert np.array_equal(bl.b_check, bl.m_check)
    assert np.array_equal(bl.b_check, bl.b_star_check)
    assert not bl.is_initial
    # log A ~ N(-m, sigma_sq)
    assert bl.s_check.mean() == pytest.approx(-0.05, abs=4 * 0.2 / math.sqrt(2000))


def test_tau_geometric_mean(ar1_model, ar1_cert):
    bl = mr.sample_blocks(ar1_model, ar1_cert, 4000, seed=19)
    # regeneration fires from inside the small set with probability delta;
    # tau is bounded below by a geometric with that rate only on the steps
    # spent inside, so only a loose sanity band is asserted
    assert bl.tau.min() >= 1
    mean = bl.tau.mean()
    assert 1.0 / ar1_cert.delta_a <= mean <= 5.0 / ar1_cert.delta_a


def test_blocks_prefix_stability(ar1_model, ar1_cert):
    a = mr.sample_blocks(ar1_model, ar1_cert, 500, seed=9)
    b = mr.sample_blocks(ar1_model, ar1_cert, 800, seed=9)
    assert np.array_equal(a.tau, b.tau[:500])
    assert np.array_equal(a.s_check, b.s_check[:500])
    assert np.array_equal(a.b_star_check, b.b_star_check[:500])


def test_blocks_prefix_stability_across_chunks(ar1_model, ar1_cert):
    a = mr.sample_blocks(ar1_model, ar1_cert, 500, seed=9, chunk=256)
    b = mr.sample_blocks(ar1_model, ar1_cert, 900, seed=9, chunk=256)
    assert np.array_equal(a.s_check, b.s_check[:500])
    # the chunk width is part of the stream identity
    c = mr.sample_blocks(ar1_model, ar1_cert, 500, seed=9, chunk=512)
    assert not np.array_equal(a.s_check, c.s_check)


def test_blocks_determinism(ar1_model, ar1_cert):
    a = mr.sample_blocks(ar1_model, ar1_cert, 300, seed=4)
    b = mr.sample_blocks(ar1_model, ar1_cert, 300, seed=4)
    assert np.array_equal(a.s_check, b.s_check)
    c = mr.sample_blocks(ar1_model, ar1_cert, 300, seed=5)
    assert not np.array_equal(a.s_check, c.s_check)


def test_empty_request():
    m = mr.make_model("iid_lognormal", m=0.1, sigma_sq=0.04)
    cert = mr.minorize_model(m)
    bl = mr.sample_blocks(m, cert, 0, seed=1)
    assert len(bl) == 0


def test_initial_blocks_from_pinned_start(ar1_model, ar1_cert):
    bl = mr.sample_blocks(ar1_model, ar1_cert, 800, seed=3, initial=True, x0=50.0)
    assert bl.is_initial
    # a start far outside the small set needs several halvings before any
    # regeneration can fire
    assert bl.tau.min() >= 3
    plain = mr.sample_blocks(ar1_model, ar1_cert, 800, seed=3)
    assert bl.tau.mean() > plain.tau.mean()


def test_single_cycle_matches_row_shape(ar1_model, ar1_cert, rng):
    blk = mr.simulate_cycle(ar1_model, ar1_cert, rng)
    assert isinstance(blk, mr.RegenBlock)
    assert blk.tau >= 1
    assert not blk.is_initial
    assert blk.a_check == pytest.approx(math.exp(blk.s_check), rel=1e-15)


def test_initial_block_single(ar1_model, ar1_cert, rng):
    blk = mr.simulate_initial_block(ar1_model, ar1_cert, 5.0, rng)
    assert blk.is_initial
    assert blk.tau >= 1


def test_cycle_overflow_on_tiny_delta(ar1_model, ar1_cert):
    starved = mr.clone_cert_with_delta(ar1_cert, 1e-12)
    with pytest.raises(CycleOverflow):
        mr.sample_blocks(ar1_model, starved, 64, seed=2, step_cap=50, chunk=64)


def test_blocks_concat_round_trip(ar1_model, ar1_cert):
    a = mr.sample_blocks(ar1_model, ar1_cert, 100, seed=1)
    b = mr.sample_blocks(ar1_model, ar1_cert, 50, seed=2)
    cat = mr.blocks_concat([a, b])
    assert len(cat) == 150
    assert np.array_equal(cat.s_check[:100], a.s_check)
    assert np.array_equal(cat.s_check[100:], b.s_check)
    assert cat.row(100).s_check == b.s_check[0]


def test_finite_chain_blocks(regime2):
    cert = mr.minorize_model(regime2)
    bl = mr.sample_blocks(regime2, cert, 3000, seed=21)
    assert np.all(bl.tau >= 1)
    assert np.all(np.isfinite(bl.s_check))
    # mean cycle length is within a loose band of 1 / delta
    assert 0.5 / cert.delta_a <= bl.tau.mean() <= 3.0 / cert.delta_a


def test_batched_paths_reconstruction(ar1_model, ar1_cert, rng):
    traces = mr.simulate_split_paths(ar1_model, ar1_cert, None, 150, 40, rng)
    assert len(traces) == 40
    worst = 0.0
    for tr in traces:
        blocks, rem = mr.carve_blocks(tr)
        w = mr.blocks_to_w(blocks, rem)
        d = direct_partial_sum(tr)
        worst = max(worst, abs(w - d) / max(1e-12, abs(d)))
    assert worst < 1e-12


# -- law preservation -------------------------------------------------------------


def test_split_marginal_check_ar1(ar1_model, ar1_cert):
    rng = np.random.default_rng(77)
    out = mr.split_marginal_check(
        ar1_model, ar1_cert, horizon=25, n_paths=4000, rng=rng, n_regen=1500
    )
    assert out["endpoint_pvalue"] > 0.01
    assert out["regen_pvalue"] > 0.01


def test_split_marginal_check_finite(regime2):
    rng = np.random.default_rng(78)
    cert = mr.minorize_model(regime2)
    out = mr.split_marginal_check(
        regime2, cert, horizon=25, n_paths=4000, rng=rng, n_regen=1500
    )
    assert out["endpoint_pvalue"] > 0.01
    assert out["regen_pvalue"] > 0.01


def test_split_marginal_check_needs_scalar_state():
    sv = mr.make_model("sv_mixed", vol_c=0.7, vol_sd=0.3, frac_bank=0.4, rate=0.04)
    cert = mr.minorize_model(sv)
    with pytest.raises(Unsupported):
        mr.split_marginal_check(sv, cert, 10, 100, np.random.default_rng(0))
