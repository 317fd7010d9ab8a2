"""Monte Carlo ruin and perpetuity estimation.

The ruin probability at level u is P{W > u} for W the running supremum of
the discounted loss sums W_n = sum_t (prod_{s<t} A_s) B_t.  Everything here
works on plain-chain paths; regenerative quantities enter only through the
cycle summaries consumed by the tail-constant estimator.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateMcheck,
    HorizonSuspectWarning,
    InsufficientTail,
    NonContracting,
    TooFewEvents,
)
from .models import FINITE_KINDS, GARCH_KINDS
from .regeneration import BlockArrays, _tile_x0

DEFAULT_HORIZON = 10 ** 4
DEFAULT_CHUNK = 8192
STEP_CAP = 10 ** 7

# a lane retires when its remaining contributions are below double
# precision relative to the max it has reached; measured against the
# largest loss seen so far, which keeps the rule invariant under
# rescaling the losses (needed for the exact scale-equivariance check)
RETIRE_REL = 1e-16

# fraction of lanes allowed to still be improving near the step cap
# before the horizon is flagged as suspect
GROWTH_TOL = 1e-3


@dataclass(frozen=True)
class TailSampleSet:
    """Draws of W (running sup), W_infinity, or the GARCH stationary law."""

    samples: np.ndarray
    kind: str  # ruin_sup | perpetuity | garch_stationary
    seed: int
    horizon: int
    n_capped: int
    growth_fraction: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def horizon_suspect(self) -> bool:
        n = max(1, self.samples.shape[0])
        return self.n_capped > GROWTH_TOL * n or self.growth_fraction > GROWTH_TOL


@dataclass(frozen=True)
class RuinCurve:
    """Ruin probability estimates on an ascending grid of levels."""

    u_grid: np.ndarray
    psi_hat: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_paths: int
    horizon: int
    exponent_used: float | None = None
    fitted_slope: float | None = None
    fitted_log_c: float | None = None
    horizon_suspect: bool = False
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PowerTailFit:
    """Weighted least squares fit of log psi_hat against log u."""

    slope: float
    log_c: float
    flatness: float
    r_hat: float
    n_points: int
    u_window: tuple


@dataclass(frozen=True)
class HillEstimate:
    index: float
    ci: tuple
    k: int
    threshold: float


@dataclass(frozen=True)
class GoldieEstimate:
    """Cycle-form tail constant: psi(u) ~ c_hat u^{-eta}."""

    d_hat: float
    c_hat: float | None
    eta: float
    m_norm: float
    m_norm_se: float
    ci_d: tuple
    ci_c: tuple | None
    n_cycles: int
    meta: dict = field(default_factory=dict)


# -- path engines ---------------------------------------------------------------


def _chunk_children(seed, n_chunks):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n_chunks)


def _run_w_chunk(model, lanes, rng, *, x0, cert, entry, horizon, mode, retire_rel, tol):
    """Advance `lanes` plain-chain paths, accumulating discounted losses.

    Returns (per-lane result, per-lane mask of lanes still live at the
    horizon, per-lane step index of the last improvement, final values).
    """
    if entry == "nu":
        states = cert.nu_sampler(rng, lanes)
        if model.kind in FINITE_KINDS:
            states = np.asarray(states, dtype=np.int64)
    else:
        states = model.advance_vec(_tile_x0(model, x0, lanes), rng)
    log_a, b = model.realize_vec(states, rng)
    w = np.asarray(b, dtype=float).copy()
    wsup = w.copy()
    logd = np.asarray(log_a, dtype=float).copy()
    bmax = np.abs(np.asarray(b, dtype=float))
    last_imp = np.ones(lanes, dtype=np.int64)
    active = np.arange(lanes)
    t = 1
    while active.size and t < horizon:
        t += 1
        states, log_a, b = model.step_vec(states, rng)
        disc = np.exp(logd[active])
        w[active] += disc * b
        if mode == "sup":
            imp = w[active] > wsup[active]
            if imp.any():
                lanes_imp = active[imp]
                wsup[lanes_imp] = w[lanes_imp]
                last_imp[lanes_imp] = t
        logd[active] += log_a
        bmax[active] = np.maximum(bmax[active], np.abs(b))
        disc = np.exp(logd[active])
        bm = bmax[active]
        if mode == "sup":
            ref = np.maximum(np.abs(wsup[active]), bm)
            keep = disc * bm > retire_rel * ref
        else:
            keep = disc * bm > tol * (1.0 + np.abs(w[active]))
        keep &= bm > 0.0
        if not keep.all():
            active = active[keep]
            states = states[keep]
    out = wsup if mode == "sup" else w
    alive = np.zeros(lanes, dtype=bool)
    alive[active] = True
    return out, alive, last_imp, w


def _w_samples(model, n_paths, seed, *, x0, cert, entry, horizon, chunk, mode, retire_rel, tol):
    # every chunk is simulated at full width and sliced, so the draws a
    # lane sees never depend on n_paths; sample i is a function of
    # (seed, i) alone
    n_chunks = -(-n_paths // chunk)
    children = _chunk_children(seed, n_chunks)
    parts, capped, late_growth = [], 0, 0
    late = max(1, int(0.9 * horizon))
    for k in range(n_chunks):
        rng = np.random.default_rng(children[k])
        out, alive, last_imp, _ = _run_w_chunk(
            model,
            chunk,
            rng,
            x0=x0,
            cert=cert,
            entry=entry,
            horizon=horizon,
            mode=mode,
            retire_rel=retire_rel,
            tol=tol,
        )
        need = min(chunk, n_paths - k * chunk)
        parts.append(out[:need])
        capped += int(alive[:need].sum())
        late_growth += int((last_imp[:need] > late).sum())
    return np.concatenate(parts), capped, late_growth / max(1, n_paths)


def simulate_w_sup(model, horizon, rng, *, x0=None):
    """One path's running supremum and final discounted sum.

    Iterates W_n = W_{n-1} + (A_1...A_{n-1}) B_n with the discount product
    held in log domain, exiting early once the product is so small that
    the remaining contributions cannot move the supremum at double
    precision.  Returns (w_sup, w_final).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    out, _, _, w = _run_w_chunk(
        model,
        1,
        rng,
        x0=x0,
        cert=None,
        entry="plain",
        horizon=horizon,
        mode="sup",
        retire_rel=RETIRE_REL,
        tol=0.0,
    )
    return float(out[0]), float(w[0])


def sample_w_sup(
    model,
    n_paths,
    seed,
    *,
    x0=None,
    cert=None,
    entry="plain",
    horizon=DEFAULT_HORIZON,
    chunk=DEFAULT_CHUNK,
    retire_rel=RETIRE_REL,
) -> TailSampleSet:
    """Sample the running supremum W over n_paths independent paths.

    entry="plain" starts from x0 (one plain step in); entry="nu" draws the
    first state from the certificate's regeneration measure, the boundary
    condition the cycle-form tail constant needs (a forced regeneration at
    time 1).  Chunks own SeedSequence children, so sample i is unchanged
    when n_paths grows.  Lanes still improving near the horizon cap are
    counted and flagged.
    """
    if entry not in ("plain", "nu"):
        raise ValueError("entry must be 'plain' or 'nu'")
    if entry == "nu" and cert is None:
        raise ValueError("entry='nu' needs a minorization certificate")
    w, capped, growth = _w_samples(
        model,
        n_paths,
        seed,
        x0=x0,
        cert=cert,
        entry=entry,
        horizon=horizon,
        chunk=chunk,
        mode="sup",
        retire_rel=retire_rel,
        tol=0.0,
    )
    out = TailSampleSet(
        samples=w,
        kind="ruin_sup",
        seed=int(seed) if np.isscalar(seed) else -1,
        horizon=int(horizon),
        n_capped=capped,
        growth_fraction=float(growth),
        meta={"entry": entry, "chunk": int(chunk)},
    )
    if out.horizon_suspect:
        warnings.warn(
            f"{capped} lanes reached the {horizon}-step cap and "
            f"{100 * growth:.3f}% improved in the last 10% of it; the "
            "supremum may be under-sampled",
            HorizonSuspectWarning,
        )
    return out


def simulate_perpetuity(model, tol, rng, *, x0=None, step_cap=STEP_CAP):
    """One draw of W_infinity = lim W_n.

    Iterates until the next contributions are below tol relative to
    1 + |current sum|.  tol must lie in (0, 1e-6].  Raises NonContracting
    when the mean log discount is nonnegative or the discount product
    fails to shrink within the step cap.
    """
    tol = float(tol)
    if not 0.0 < tol <= 1e-6:
        raise ValueError("tol must lie in (0, 1e-6]")
    if model.drift() >= 0.0:
        raise NonContracting(
            "mean log discount is nonnegative; W_n does not converge"
        )
    _, alive, _, w = _run_w_chunk(
        model,
        1,
        rng,
        x0=x0,
        cert=None,
        entry="plain",
        horizon=step_cap,
        mode="limit",
        retire_rel=RETIRE_REL,
        tol=tol,
    )
    if alive[0]:
        raise NonContracting(
            f"discount product failed to shrink within {step_cap} steps"
        )
    return float(w[0])


def sample_perpetuity(
    model,
    n_paths,
    seed,
    *,
    tol=1e-9,
    x0=None,
    horizon=10 ** 5,
    chunk=DEFAULT_CHUNK,
) -> TailSampleSet:
    """n_paths independent draws of W_infinity (batched simulate_perpetuity)."""
    tol = float(tol)
    if not 0.0 < tol <= 1e-6:
        raise ValueError("tol must lie in (0, 1e-6]")
    if model.drift() >= 0.0:
        raise NonContracting(
            "mean log discount is nonnegative; W_n does not converge"
        )
    w, capped, growth = _w_samples(
        model,
        n_paths,
        seed,
        x0=x0,
        cert=None,
        entry="plain",
        horizon=horizon,
        chunk=chunk,
        mode="limit",
        retire_rel=RETIRE_REL,
        tol=tol,
    )
    out = TailSampleSet(
        samples=w,
        kind="perpetuity",
        seed=int(seed) if np.isscalar(seed) else -1,
        horizon=int(horizon),
        n_capped=capped,
        growth_fraction=float(growth),
        meta={"tol": tol, "chunk": int(chunk), "truncation_bias_rel": tol},
    )
    if out.horizon_suspect:
        warnings.warn(
            f"{capped} lanes had not converged after {horizon} steps",
            HorizonSuspectWarning,
        )
    return out


def simulate_garch_stationary(model, burn_in, rng):
    """One approximately-stationary draw of the squared volatility.

    Iterates v <- a0 + A v from the mean fixed point (clipped positive)
    for burn_in steps; burn_in must be at least 1000.
    """
    if model.kind not in GARCH_KINDS:
        raise ValueError("stationary volatility sampling needs a GARCH kind")
    if burn_in < 10 ** 3:
        raise ValueError("burn_in must be at least 1000")
    if model.drift() >= 0.0:
        raise NonContracting(
            "mean log discount is nonnegative; no stationary law"
        )
    states = model.initial_vec(rng, 1)
    v = np.array([_garch_v0(model)])
    for _ in range(int(burn_in)):
        states, log_a, b = model.step_vec(states, rng)
        v = b + np.exp(log_a) * v
    return float(v[0])


def _garch_v0(model):
    mean_slope = float(model.b1.mean() + model.a1.mean())
    a0 = float(model.a0.mean())
    return a0 / (1.0 - mean_slope) if mean_slope < 1.0 else a0


def sample_garch_stationary(
    model, n_paths, seed, *, burn_in=1000, chunk=2 ** 17
) -> TailSampleSet:
    """n_paths stationary squared-volatility draws (batched)."""
    if model.kind not in GARCH_KINDS:
        raise ValueError("stationary volatility sampling needs a GARCH kind")
    if burn_in < 10 ** 3:
        raise ValueError("burn_in must be at least 1000")
    if model.drift() >= 0.0:
        raise NonContracting(
            "mean log discount is nonnegative; no stationary law"
        )
    n_chunks = -(-n_paths // chunk)
    children = _chunk_children(seed, n_chunks)
    v0 = _garch_v0(model)
    parts = []
    for k in range(n_chunks):
        # full-width chunks keep draw shapes independent of n_paths, so
        # sample i never moves when the request grows
        rng = np.random.default_rng(children[k])
        states = model.initial_vec(rng, chunk)
        v = np.full(chunk, v0)
        for _ in range(int(burn_in)):
            states, log_a, b = model.step_vec(states, rng)
            v = b + np.exp(log_a) * v
        parts.append(v[: min(chunk, n_paths - k * chunk)])
    return TailSampleSet(
        samples=np.concatenate(parts),
        kind="garch_stationary",
        seed=int(seed) if np.isscalar(seed) else -1,
        horizon=int(burn_in),
        n_capped=0,
        growth_fraction=0.0,
        meta={"burn_in": int(burn_in), "v0": float(v0), "chunk": int(chunk)},
    )


# -- curve estimation -------------------------------------------------------------


def wilson_interval(successes, n, z=1.96):
    """Wilson score interval for a binomial proportion (vectorized)."""
    k = np.asarray(successes, dtype=float)
    n = float(n)
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2.0 * n)) / denom
    half = z * np.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom
    return center - half, center + half


def curve_from_samples(
    samples,
    u_grid=None,
    *,
    n_levels=12,
    q_lo=0.95,
    q_hi=0.999,
    z=1.96,
    horizon=None,
) -> RuinCurve:
    """Empirical ruin curve psi_hat(u) = P{W > u} with Wilson intervals.

    One shared sample set serves the whole grid (common random numbers).
    When u_grid is omitted it is pinned to sample quantiles between q_lo
    and q_hi, so every level keeps a usable number of exceedances.
    """
    if isinstance(samples, TailSampleSet):
        w = samples.samples
        suspect = samples.horizon_suspect
        horizon = samples.horizon if horizon is None else horizon
    else:
        w = np.asarray(samples, dtype=float)
        suspect = False
    n = w.shape[0]
    if u_grid is None:
        qs = np.linspace(q_lo, q_hi, n_levels)
        u = np.unique(np.quantile(w, qs))
    else:
        u = np.asarray(u_grid, dtype=float)
        if u.ndim != 1 or u.size == 0:
            raise ValueError("u_grid must be a nonempty 1-D array")
        if np.any(np.diff(u) <= 0.0):
            raise ValueError("u_grid must be strictly ascending")
    if u.size * n <= 5 * 10 ** 7:
        counts = (w[None, :] > u[:, None]).sum(axis=1)
    else:
        counts = np.array([(w > ui).sum() for ui in u])
    psi = counts / n
    lo, hi = wilson_interval(counts, n, z)
    return RuinCurve(
        u_grid=u,
        psi_hat=psi,
        ci_lo=lo,
        ci_hi=hi,
        n_paths=int(n),
        horizon=int(horizon) if horizon is not None else 0,
        horizon_suspect=bool(suspect),
        meta={"z": float(z)},
    )


def estimate_ruin_curve(
    model,
    u_grid=None,
    n_paths=10 ** 5,
    horizon=DEFAULT_HORIZON,
    seed=0,
    *,
    x0=None,
    n_levels=12,
    q_lo=0.95,
    q_hi=0.999,
    z=1.96,
    chunk=DEFAULT_CHUNK,
) -> RuinCurve:
    """Simulate W suprema and estimate the ruin curve on a level grid."""
    samples = sample_w_sup(
        model, n_paths, seed, x0=x0, horizon=horizon, chunk=chunk
    )
    return curve_from_samples(
        samples, u_grid, n_levels=n_levels, q_lo=q_lo, q_hi=q_hi, z=z
    )


def fit_power_tail(
    curve: RuinCurve, exponent=None, *, min_events=10, min_points=5
) -> PowerTailFit:
    """Fit log psi_hat = log_c + slope log u by weighted least squares.

    Weights are the inverse delta-method variances of log psi_hat,
    n psi / (1 - psi).  Levels with fewer than min_events exceedances are
    dropped; at least min_points must survive.  flatness is the largest
    relative deviation of u^r psi_hat from its weighted mean, with r the
    supplied exponent or, failing that, the fitted -slope.
    """
    u = np.asarray(curve.u_grid, dtype=float)
    psi = np.asarray(curve.psi_hat, dtype=float)
    n = curve.n_paths
    keep = (psi * n >= min_events) & (psi < 1.0) & (u > 0.0)
    if keep.sum() < min_points:
        raise TooFewEvents(
            f"only {int(keep.sum())} usable levels (need {min_points}); "
            "more paths or lower levels required"
        )
    x = np.log(u[keep])
    y = np.log(psi[keep])
    wts = n * psi[keep] / (1.0 - psi[keep])
    slope, intercept = np.polyfit(x, y, 1, w=np.sqrt(wts))
    r = float(exponent) if exponent is not None else -float(slope)
    v = u[keep] ** r * psi[keep]
    vbar = float(np.average(v, weights=wts))
    flat = float(np.max(np.abs(v - vbar)) / vbar) if vbar != 0.0 else np.inf
    return PowerTailFit(
        slope=float(slope),
        log_c=float(intercept),
        flatness=flat,
        r_hat=-float(slope),
        n_points=int(keep.sum()),
        u_window=(float(u[keep].min()), float(u[keep].max())),
    )


def with_fit(curve: RuinCurve, fit: PowerTailFit, exponent_used=None) -> RuinCurve:
    """Attach fit results (and the exponent used for u^r psi) to a curve."""
    return dataclasses.replace(
        curve,
        fitted_slope=fit.slope,
        fitted_log_c=fit.log_c,
        exponent_used=float(exponent_used) if exponent_used is not None else fit.r_hat,
    )


def hill_estimator(samples, k, *, z=1.96) -> HillEstimate:
    """Hill tail-index estimate from the k largest order statistics.

    index = 1 / mean log excess over the (k+1)-th largest value, with the
    normal-theory interval index (1 +- z / sqrt(k)).
    """
    x = samples.samples if isinstance(samples, TailSampleSet) else np.asarray(
        samples, dtype=float
    )
    n = x.shape[0]
    k = int(k)
    if k < 50:
        raise InsufficientTail("need at least 50 order statistics")
    if k > n // 10:
        raise InsufficientTail(
            f"k = {k} exceeds a tenth of the sample ({n}); the estimate "
            "would leave the tail"
        )
    top = np.sort(x)[-(k + 1):]
    x_k = top[0]
    if x_k <= 0.0:
        raise InsufficientTail("threshold order statistic is not positive")
    h = float(np.mean(np.log(top[1:]) - np.log(x_k)))
    if h <= 0.0:
        raise InsufficientTail("degenerate log excesses (zero spacings)")
    idx = 1.0 / h
    return HillEstimate(
        index=idx,
        ci=(idx * (1.0 - z / np.sqrt(k)), idx * (1.0 + z / np.sqrt(k))),
        k=k,
        threshold=float(x_k),
    )


# -- cycle-form tail constant -------------------------------------------------------


def _goldie_terms(s, b, m, w_r, eta):
    aw = np.exp(s) * w_r
    lead = np.maximum(m, b + aw)
    top = np.clip(lead, 0.0, None) ** eta - np.clip(aw, 0.0, None) ** eta
    norm = np.exp(eta * s) * s
    return top, norm


def estimate_goldie_constant(
    blocks: BlockArrays,
    wr_samples,
    eta,
    *,
    initial_blocks: BlockArrays | None = None,
    n_boot=400,
    seed=0,
    ci_level=0.95,
) -> GoldieEstimate:
    """Tail constant from cycle summaries paired with boundary suprema.

    With blocks the regular-cycle summaries and wr_samples independent
    suprema started from the regeneration measure (block i paired with
    draw i),

        d_hat = E[(max(M, B + A W)^+)^eta - ((A W)^+)^eta] / (eta m)

    where m = E[A^eta log A] is estimated on the same cycles.  Both terms
    are clipped at zero before the power: the exponent is fractional in
    general and the max can be negative when every partial sum in a cycle
    is.  When initial_blocks is given the constant is completed to
    c_hat = d_hat E[A_0^eta], so that psi(u) ~ c_hat u^{-eta}.  Positivity
    of d_hat is reported through its bootstrap interval, not assumed.
    """
    if blocks.is_initial:
        raise ValueError("regular cycles required (is_initial is set)")
    if isinstance(wr_samples, TailSampleSet):
        wr_samples = wr_samples.samples
    w_r = np.asarray(wr_samples, dtype=float)
    n = min(len(blocks), w_r.shape[0])
    if n < 100:
        raise TooFewEvents("need at least 100 paired cycles")
    s = blocks.s_check[:n]
    b = blocks.b_check[:n]
    m = blocks.m_check[:n]
    w_r = w_r[:n]
    eta = float(eta)
    top, norm = _goldie_terms(s, b, m, w_r, eta)
    m_norm = float(norm.mean())
    m_se = float(norm.std(ddof=1) / np.sqrt(n))
    if m_norm <= 2.0 * m_se:
        raise DegenerateMcheck(
            f"cycle norming constant {m_norm:.3e} is within noise "
            f"({m_se:.3e}); eta is wrong or the sample too small"
        )
    d_hat = float(top.mean() / (eta * m_norm))
    e0 = np.exp(eta * initial_blocks.s_check) if initial_blocks is not None else None
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_boot = max(200, int(n_boot))
    d_b = np.full(n_boot, np.nan)
    c_b = np.full(n_boot, np.nan) if e0 is not None else None
    for i in range(n_boot):
        idx = rng.integers(0, n, size=n)
        nb = float(norm[idx].mean())
        if nb > 0.0:
            d_b[i] = top[idx].mean() / (eta * nb)
        if e0 is not None and nb > 0.0:
            j = rng.integers(0, e0.shape[0], size=e0.shape[0])
            c_b[i] = d_b[i] * e0[j].mean()
    tail = 0.5 * (1.0 - ci_level)
    good = d_b[~np.isnan(d_b)]
    lo_d, hi_d = np.percentile(good, [100 * tail, 100 * (1 - tail)])
    c_hat = None
    ci_c = None
    if e0 is not None:
        c_hat = d_hat * float(e0.mean())
        goodc = c_b[~np.isnan(c_b)]
        lo_c, hi_c = np.percentile(goodc, [100 * tail, 100 * (1 - tail)])
        ci_c = (float(lo_c), float(hi_c))
    return GoldieEstimate(
        d_hat=d_hat,
        c_hat=c_hat,
        eta=eta,
        m_norm=m_norm,
        m_norm_se=m_se,
        ci_d=(float(lo_d), float(hi_d)),
        ci_c=ci_c,
        n_cycles=int(n),
        meta={
            "n_boot": int(n_boot),
            "n_bad_boot": int(np.isnan(d_b).sum()),
            "ci_level": float(ci_level),
        },
    )
