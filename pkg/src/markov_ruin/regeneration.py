"""Regenerative block decomposition of Markov-modulated recursions.

The split chain runs the model's transition kernel factored through a
minorization certificate: from a state inside the small set, with
probability delta the next state is drawn from nu (a regeneration), and
otherwise from the residual kernel (P - delta nu) / (1 - delta).  Cutting
the path at regeneration times yields i.i.d. cycles whose summaries
(discount, discounted loss, running max, forward value) drive the tail
estimators.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import CycleOverflow, TooFewEvents, Unsupported
from .models import FINITE_KINDS, Kind, MinorizationCert, ModelSpec

DEFAULT_STEP_CAP = 10 ** 7
DEFAULT_CHUNK = 4096

# maximum rejection passes before declaring the residual sampler stuck;
# per-pass acceptance is at least 1 - delta, so this is unreachable for
# any certificate with delta bounded away from 1
_MAX_REJECT_PASSES = 10 ** 6


@dataclass(frozen=True)
class RegenBlock:
    """Summary of one block of the split chain.

    tau: number of model steps in the block.
    s_check: sum of log A over the block.
    b_check: discounted loss sum, sum_t (prod_{s<t} A_s) B_t, discounts
        local to the block.
    m_check: running max of the partial discounted loss sums.
    b_star_check: forward recursion value z after the block, z <- A z + B
        started from z = 0.
    """

    tau: int
    s_check: float
    b_check: float
    m_check: float
    b_star_check: float
    is_initial: bool = False

    @property
    def a_check(self) -> float:
        return float(np.exp(self.s_check))


@dataclass(frozen=True)
class BlockArrays:
    """Column-wise batch of block summaries (one row per cycle)."""

    tau: np.ndarray
    s_check: np.ndarray
    b_check: np.ndarray
    m_check: np.ndarray
    b_star_check: np.ndarray
    is_initial: bool = False

    def __len__(self) -> int:
        return int(self.tau.shape[0])

    @property
    def a_check(self) -> np.ndarray:
        return np.exp(self.s_check)

    def row(self, i: int) -> RegenBlock:
        return RegenBlock(
            tau=int(self.tau[i]),
            s_check=float(self.s_check[i]),
            b_check=float(self.b_check[i]),
            m_check=float(self.m_check[i]),
            b_star_check=float(self.b_star_check[i]),
            is_initial=self.is_initial,
        )


@dataclass(frozen=True)
class SplitTrace:
    """One path of the split chain, states recorded from time 1.

    states[t - 1] is the internal driving state at time t; log_a and b are
    the realized per-step discount logs and losses.  regen_times lists the
    times whose state was drawn from nu (the regeneration times T_0 < T_1
    < ...; the step into time 1 is always taken plain, so entries are >= 2).
    """

    states: np.ndarray
    log_a: np.ndarray
    b: np.ndarray
    regen_times: np.ndarray
    x0: np.ndarray

    def __len__(self) -> int:
        return int(self.log_a.shape[0])


# -- split kernel stepping --------------------------------------------------


def _alloc_states(model: ModelSpec, n: int) -> np.ndarray:
    if model.kind in FINITE_KINDS:
        return np.empty(n, dtype=np.int64)
    if model.state_dim == 1 and model.kind != Kind.SV_MIXED:
        return np.empty(n, dtype=float)
    return np.empty((n, model.state_dim), dtype=float)


def residual_rows(model: ModelSpec, cert: MinorizationCert) -> np.ndarray:
    """Cumulative residual-kernel rows for a finite-state certificate."""
    if model.kind not in FINITE_KINDS:
        raise Unsupported("residual rows exist only for finite-state kinds")
    pmf = cert.nu_pmf
    d = cert.delta_a
    if 1.0 - d < 1e-12:
        # residual never sampled when delta = 1; keep rows well formed
        rows = np.tile(pmf, (model.transition.shape[0], 1))
    else:
        rows = (model.transition - d * pmf[None, :]) / (1.0 - d)
        rows = np.clip(rows, 0.0, None)
        rows /= rows.sum(axis=1, keepdims=True)
    return np.cumsum(rows, axis=1)


def _residual_reject(model, cert, x, rng):
    """Draw from (P - delta nu) / (1 - delta) by rejection.

    Propose y ~ P(x, .), accept with probability 1 - delta nu(y) / p(x, y);
    lane coupling is lawful because acceptance depends only on the lane's
    own draws.
    """
    k = x.shape[0]
    out = _alloc_states(model, k)
    pending = np.arange(k)
    cur = x
    for _ in range(_MAX_REJECT_PASSES):
        prop = model.advance_vec(cur, rng)
        logp = model.transition_logpdf(cur, prop)
        dnu = cert.delta_nu_density(prop)
        with np.errstate(divide="ignore"):
            log_r = np.where(dnu > 0.0, np.log(np.maximum(dnu, 1e-300)) - logp, -np.inf)
        r = np.exp(np.minimum(log_r, 0.0))
        acc = rng.random(pending.shape[0]) >= r
        if acc.any():
            out[pending[acc]] = prop[acc]
        keep = ~acc
        if not keep.any():
            return out
        pending = pending[keep]
        cur = cur[keep]
        prop = None
    raise RuntimeError("residual rejection sampler failed to terminate")


def split_step_states(model, cert, x, rng, residual_cum=None):
    """One split-kernel transition for a batch of internal states.

    Returns (new_states, fired); fired lanes drew their next state from nu.
    Draw order is fixed (fire uniforms, nu draws, residual draws, plain
    advances) so a given rng stream reproduces the same path.
    """
    n = x.shape[0]
    in_set = cert.in_small_set(model, x)
    fired = np.zeros(n, dtype=bool)
    idx = np.nonzero(in_set)[0]
    if idx.size:
        fired[idx] = rng.random(idx.size) < cert.delta_a
    new = _alloc_states(model, n)
    f = np.nonzero(fired)[0]
    if f.size:
        new[f] = cert.nu_sampler(rng, f.size)
    r = np.nonzero(in_set & ~fired)[0]
    if r.size:
        if model.kind in FINITE_KINDS:
            if residual_cum is None:
                residual_cum = residual_rows(model, cert)
            u = rng.random(r.size)
            rows = residual_cum[np.asarray(x, dtype=np.int64)[r]]
            new[r] = (u[:, None] > rows).sum(axis=1)
        else:
            new[r] = _residual_reject(model, cert, x[r], rng)
    p = np.nonzero(~in_set)[0]
    if p.size:
        new[p] = model.advance_vec(x[p], rng)
    return new, fired


# -- single-block simulation ------------------------------------------------


class _Accum:
    """Incremental block-summary accumulator over lanes."""

    def __init__(self, log_a, b):
        a = np.exp(log_a)
        self.tau = np.ones(log_a.shape[0], dtype=np.int64)
        self.s = log_a.copy()
        self.bsum = b.copy()
        self.m = b.copy()
        self.disc = a
        self.z = b.copy()

    def push(self, sel, log_a, b):
        a = np.exp(log_a)
        self.bsum[sel] += self.disc[sel] * b
        self.m[sel] = np.maximum(self.m[sel], self.bsum[sel])
        self.disc[sel] *= a
        self.z[sel] = a * self.z[sel] + b
        self.s[sel] += log_a
        self.tau[sel] += 1

    def take(self, sel):
        return (self.tau[sel], self.s[sel], self.bsum[sel], self.m[sel], self.z[sel])


def _run_blocks(model, cert, entries, rng, step_cap, is_initial, residual_cum):
    """Run one block per lane to completion; lanes are compacted as they fire."""
    n = entries.shape[0]
    log_a, b = model.realize_vec(entries, rng)
    acc = _Accum(log_a, b)
    out_tau = np.empty(n, dtype=np.int64)
    out = [np.empty(n) for _ in range(4)]
    active = np.arange(n)
    states = entries
    while active.size:
        in_set = cert.in_small_set(model, states)
        fired = np.zeros(active.size, dtype=bool)
        idx = np.nonzero(in_set)[0]
        if idx.size:
            fired[idx] = rng.random(idx.size) < cert.delta_a
        done = np.nonzero(fired)[0]
        if done.size:
            lanes = active[done]
            tau, s, bsum, m, z = acc.take(lanes)
            out_tau[lanes] = tau
            out[0][lanes] = s
            out[1][lanes] = bsum
            out[2][lanes] = m
            out[3][lanes] = z
        cont = np.nonzero(~fired)[0]
        if not cont.size:
            break
        sub = states[cont]
        sub_in = in_set[cont]
        new = _alloc_states(model, cont.size)
        r = np.nonzero(sub_in)[0]
        if r.size:
            if model.kind in FINITE_KINDS:
                u = rng.random(r.size)
                rows = residual_cum[np.asarray(sub, dtype=np.int64)[r]]
                new[r] = (u[:, None] > rows).sum(axis=1)
            else:
                new[r] = _residual_reject(model, cert, sub[r], rng)
        p = np.nonzero(~sub_in)[0]
        if p.size:
            new[p] = model.advance_vec(sub[p], rng)
        log_a, b = model.realize_vec(new, rng)
        active = active[cont]
        acc.push(active, log_a, b)
        states = new
        if acc.tau[active].max() > step_cap:
            raise CycleOverflow(
                f"block exceeded {step_cap} steps without regenerating"
            )
    return BlockArrays(
        tau=out_tau,
        s_check=out[0],
        b_check=out[1],
        m_check=out[2],
        b_star_check=out[3],
        is_initial=is_initial,
    )


def simulate_cycle(model, cert, rng, step_cap=DEFAULT_STEP_CAP) -> RegenBlock:
    """Simulate one regeneration cycle (entry state drawn from nu)."""
    residual_cum = residual_rows(model, cert) if model.kind in FINITE_KINDS else None
    entry = cert.nu_sampler(rng, 1)
    arrs = _run_blocks(model, cert, entry, rng, step_cap, False, residual_cum)
    return arrs.row(0)


def simulate_initial_block(
    model, cert, x0, rng, step_cap=DEFAULT_STEP_CAP
) -> RegenBlock:
    """Simulate the pre-regeneration block started from a fixed point x0.

    The step into time 1 is taken plain; the block covers times 1 through
    T_0 - 1 and is nonempty by construction (the first regeneration can
    fire no earlier than time 2).
    """
    residual_cum = residual_rows(model, cert) if model.kind in FINITE_KINDS else None
    start = _tile_x0(model, x0, 1)
    entry = model.advance_vec(start, rng)
    arrs = _run_blocks(model, cert, entry, rng, step_cap, True, residual_cum)
    return arrs.row(0)


def _tile_x0(model, x0, n):
    if hasattr(x0, "x"):
        x0 = x0.x
    base = model.default_x0() if x0 is None else np.asarray(x0)
    if model.kind in FINITE_KINDS:
        return np.full(n, int(np.asarray(base).ravel()[0]), dtype=np.int64)
    base = np.atleast_1d(np.asarray(base, dtype=float))
    if model.state_dim == 1 and model.kind != Kind.SV_MIXED:
        return np.full(n, float(base[0]))
    return np.tile(base.reshape(1, -1), (n, 1))


def sample_blocks(
    model,
    cert,
    n_blocks,
    seed,
    *,
    initial=False,
    x0=None,
    step_cap=DEFAULT_STEP_CAP,
    chunk=DEFAULT_CHUNK,
) -> BlockArrays:
    """Simulate n_blocks independent blocks with chunk-stable streams.

    Block i is produced by lane i % chunk of chunk i // chunk, each chunk
    running from its own SeedSequence child. Every chunk is simulated at
    full width even when fewer blocks are needed from it; the surplus lanes
    are discarded. Draw shapes inside a chunk therefore never depend on
    n_blocks, so growing n_blocks extends the output without disturbing
    earlier rows.
    """
    if n_blocks <= 0:
        z = np.empty(0)
        return BlockArrays(np.empty(0, np.int64), z, z.copy(), z.copy(), z.copy(), initial)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    n_chunks = -(-n_blocks // chunk)
    children = ss.spawn(n_chunks)
    residual_cum = residual_rows(model, cert) if model.kind in FINITE_KINDS else None
    parts = []
    for k in range(n_chunks):
        rng = np.random.default_rng(children[k])
        if initial:
            entries = model.advance_vec(_tile_x0(model, x0, chunk), rng)
        else:
            entries = cert.nu_sampler(rng, chunk)
        part = _run_blocks(model, cert, entries, rng, step_cap, initial, residual_cum)
        need = min(chunk, n_blocks - k * chunk)
        if need < chunk:
            part = BlockArrays(
                part.tau[:need],
                part.s_check[:need],
                part.b_check[:need],
                part.m_check[:need],
                part.b_star_check[:need],
                initial,
            )
        parts.append(part)
    return BlockArrays(
        tau=np.concatenate([p.tau for p in parts]),
        s_check=np.concatenate([p.s_check for p in parts]),
        b_check=np.concatenate([p.b_check for p in parts]),
        m_check=np.concatenate([p.m_check for p in parts]),
        b_star_check=np.concatenate([p.b_star_check for p in parts]),
        is_initial=initial,
    )


# -- full split-path traces and block carving --------------------------------


def simulate_split_paths(model, cert, x0, n_steps, n_paths, rng):
    """Vectorized split-chain paths; returns a list of SplitTrace."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    residual_cum = residual_rows(model, cert) if model.kind in FINITE_KINDS else None
    start = _tile_x0(model, x0, n_paths)
    x0_row = start[0] if start.ndim == 1 else start[0].copy()
    states_buf = []
    la_buf = np.empty((n_steps, n_paths))
    b_buf = np.empty((n_steps, n_paths))
    fired_buf = np.zeros((n_steps, n_paths), dtype=bool)
    x = model.advance_vec(start, rng)
    la, b = model.realize_vec(x, rng)
    states_buf.append(x)
    la_buf[0] = la
    b_buf[0] = b
    for t in range(1, n_steps):
        x, fired = split_step_states(model, cert, x, rng, residual_cum)
        la, b = model.realize_vec(x, rng)
        states_buf.append(x)
        la_buf[t] = la
        b_buf[t] = b
        fired_buf[t] = fired
    states = np.stack(states_buf, axis=0)
    traces = []
    for lane in range(n_paths):
        times = np.nonzero(fired_buf[:, lane])[0] + 1
        traces.append(
            SplitTrace(
                states=states[:, lane, ...].copy(),
                log_a=la_buf[:, lane].copy(),
                b=b_buf[:, lane].copy(),
                regen_times=times.astype(np.int64),
                x0=np.atleast_1d(x0_row),
            )
        )
    return traces


def simulate_split_path(model, cert, x0, n_steps, rng) -> SplitTrace:
    """One split-chain path of length n_steps started from x0."""
    return simulate_split_paths(model, cert, x0, n_steps, 1, rng)[0]


def _window_stats(log_a, b):
    a = np.exp(log_a)
    disc = np.empty_like(a)
    disc[0] = 1.0
    np.cumprod(a[:-1], out=disc[1:])
    parts = np.cumsum(disc * b)
    suffix = np.empty_like(a)
    suffix[-1] = 1.0
    np.cumprod(a[:0:-1], out=suffix[-2::-1])
    z = float((b * suffix).sum())
    return (
        int(log_a.shape[0]),
        float(log_a.sum()),
        float(parts[-1]),
        float(parts.max()),
        z,
    )


def carve_blocks(trace: SplitTrace, upto=None):
    """Carve a trace into completed blocks plus a discounted remainder.

    Block 0 covers times [1, T_0 - 1] (the initial block), block i covers
    [T_{i-1}, T_i - 1]; a block is emitted only when its closing
    regeneration time T_i is <= upto.  The remainder is the discounted
    loss sum over the leftover window, so that blocks_to_w(blocks,
    remainder) reproduces the perpetuity partial sum at time upto exactly.
    """
    n = len(trace) if upto is None else int(upto)
    if not 1 <= n <= len(trace):
        raise ValueError("upto outside the recorded trace")
    times = trace.regen_times[trace.regen_times <= n]
    if times.size == 0:
        _, _, rem, _, _ = _window_stats(trace.log_a[:n], trace.b[:n])
        return [], rem
    starts = np.concatenate([[1], times])
    blocks = []
    for i in range(starts.shape[0] - 1):
        lo, hi = starts[i], starts[i + 1] - 1
        tau, s, bsum, m, z = _window_stats(
            trace.log_a[lo - 1 : hi], trace.b[lo - 1 : hi]
        )
        blocks.append(
            RegenBlock(tau, s, bsum, m, z, is_initial=(i == 0))
        )
    _, _, rem, _, _ = _window_stats(trace.log_a[starts[-1] - 1 : n], trace.b[starts[-1] - 1 : n])
    return blocks, rem


def blocks_to_w(blocks, remainder=0.0) -> float:
    """Assemble the discounted partial sum from block summaries.

    W_n = sum_i (prod_{l<i} A_check_l) B_check_i + (prod A_check) R_n,
    with the remainder R_n the discounted loss sum past the last
    regeneration.
    """
    blocks = list(blocks)
    if blocks and not blocks[0].is_initial:
        raise ValueError("the first block must be the initial one")
    if any(b.is_initial for b in blocks[1:]):
        raise ValueError("only the first block may be the initial one")
    w = 0.0
    disc = 1.0
    for blk in blocks:
        w += disc * blk.b_check
        disc *= np.exp(blk.s_check)
    return float(w + disc * remainder)


# -- distributional self-check ----------------------------------------------


def _scalarize(model, states):
    if model.kind in FINITE_KINDS:
        return np.asarray(states, dtype=np.int64)
    return np.asarray(states, dtype=float)


def _two_sample_pvalue(model, a, b):
    if model.kind in FINITE_KINDS:
        k = int(max(a.max(initial=0), b.max(initial=0))) + 1
        ca = np.bincount(a, minlength=k)
        cb = np.bincount(b, minlength=k)
        keep = (ca + cb) > 0
        table = np.vstack([ca[keep], cb[keep]])
        if table.shape[1] < 2:
            return 1.0, 0.0
        res = stats.chi2_contingency(table, correction=False)
        return float(res.pvalue), float(res.statistic)
    res = stats.ks_2samp(a, b)
    return float(res.pvalue), float(res.statistic)


def split_marginal_check(
    model,
    cert,
    horizon,
    n_paths,
    rng,
    *,
    x0=None,
    n_regen=10 ** 4,
):
    """Check that splitting leaves the chain's law untouched.

    Runs n_paths lanes under the split kernel and the same number under
    the plain kernel from the same start, comparing the time-horizon
    marginals; also compares the states entered at regeneration times with
    fresh draws from nu.  Two-sample KS for continuous 1-D states,
    chi-square for finite chains.  Returns a dict with both p-values; a
    small p-value is a reported finding, not an exception.
    """
    if model.kind not in FINITE_KINDS and (
        model.state_dim != 1 or model.kind == Kind.SV_MIXED
    ):
        raise Unsupported("marginal check needs a 1-D or finite state space")
    residual_cum = residual_rows(model, cert) if model.kind in FINITE_KINDS else None
    start = _tile_x0(model, x0, n_paths)
    x = model.advance_vec(start, rng)
    regen_pool = []
    pooled = 0
    for _ in range(horizon - 1):
        x, fired = split_step_states(model, cert, x, rng, residual_cum)
        if pooled < n_regen and fired.any():
            grab = x[fired][: n_regen - pooled]
            regen_pool.append(np.array(grab))
            pooled += grab.shape[0]
    y = model.advance_vec(start, rng)
    for _ in range(horizon - 1):
        y = model.advance_vec(y, rng)
    end_p, end_stat = _two_sample_pvalue(model, _scalarize(model, x), _scalarize(model, y))
    if pooled < 50:
        raise TooFewEvents(
            f"only {pooled} regenerations observed over the horizon; "
            "increase n_paths or horizon"
        )
    regen_states = np.concatenate(regen_pool, axis=0)
    fresh = cert.nu_sampler(rng, regen_states.shape[0])
    regen_p, regen_stat = _two_sample_pvalue(
        model, _scalarize(model, regen_states), _scalarize(model, fresh)
    )
    return {
        "endpoint_pvalue": end_p,
        "endpoint_stat": end_stat,
        "regen_pvalue": regen_p,
        "regen_stat": regen_stat,
        "n_paths": int(n_paths),
        "n_regen": int(pooled),
        "horizon": int(horizon),
    }


def blocks_concat(parts) -> BlockArrays:
    """Concatenate BlockArrays batches (same is_initial flag)."""
    return BlockArrays(
        tau=np.concatenate([p.tau for p in parts]),
        s_check=np.concatenate([p.s_check for p in parts]),
        b_check=np.concatenate([p.b_check for p in parts]),
        m_check=np.concatenate([p.m_check for p in parts]),
        b_star_check=np.concatenate([p.b_star_check for p in parts]),
        is_initial=parts[0].is_initial if parts else False,
    )
