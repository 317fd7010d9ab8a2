"""Tail exponent computation.

The decay rate of the ruin probability is the positive root of the limiting
cumulant generating function Lambda(alpha) = lim (1/n) log E exp(alpha S_n),
S_n the cumulative log discount.  Several routes are implemented and kept
separate so they can cross-check each other: closed forms where the model
admits them, the spectral radius of the per-regime moment matrix for finite
chains, quadrature discretization of the tilted transition kernel, a
simulation estimate, and the root of the cycle moment equation
E[A_check^alpha] = 1 over regeneration blocks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import (
    EffectiveSampleCollapse,
    EffectiveSampleCollapseWarning,
    NoPositiveRoot,
    NoUpperBracket,
    PowerIterationStall,
    TruncationDominance,
    Unsupported,
)
from .models import FINITE_KINDS, Kind, ModelSpec
from .regeneration import BlockArrays

_ANALYTIC_KINDS = (Kind.IID_LOG_NORMAL, Kind.AR1_LOG_RETURN, Kind.GARCH11)

ALPHA_CAP = float(2 ** 40)


@dataclass(frozen=True)
class CgfEstimate:
    """Limiting-cgf values on an alpha grid, one estimation route."""

    alpha_grid: np.ndarray
    lambda_values: np.ndarray
    std_errors: np.ndarray
    method: str
    truncation_M: float | None = None
    meta: dict = field(default_factory=dict)

    def convexity_margin(self) -> float:
        """Smallest discrete second difference along the grid.

        Nonnegative (within noise) for a convex cgf; callers compare the
        margin against pooled standard errors.
        """
        v = self.lambda_values
        if v.shape[0] < 3:
            return 0.0
        return float(np.min(v[2:] - 2.0 * v[1:-1] + v[:-2]))


@dataclass(frozen=True)
class TailSolution:
    """Root of Lambda(alpha) = 0 on alpha > 0."""

    exponent: float
    method: str
    bracket: tuple
    residual: float
    std_error: float = 0.0
    ci: tuple | None = None
    meta: dict = field(default_factory=dict)


# -- closed forms --------------------------------------------------------------


def cgf_analytic(model: ModelSpec, alpha: float) -> float:
    """Exact per-period cumulant limit where a closed form exists.

    iid lognormal: -m alpha + sigma^2 alpha^2 / 2.  AR(1) log returns:
    the partial sums of the stationary chain are Gaussian with long-run
    variance sd^2 / (1 - c)^2, so the same quadratic applies with those
    constants.  GARCH(1,1): log E[(b1 + a1 xi^2)^alpha] by quadrature.
    """
    a = float(alpha)
    k = model.kind
    if k == Kind.IID_LOG_NORMAL:
        return float(-model.m * a + 0.5 * model.sigma_sq * a * a)
    if k == Kind.AR1_LOG_RETURN:
        lr = model.innovation_sd / (1.0 - model.c)
        return float(-model.mu * a + 0.5 * lr * lr * a * a)
    if k == Kind.GARCH11:
        return float(model.per_state_log_moment(a)[0])
    raise Unsupported(f"no closed-form cgf for kind {k}")


# -- spectral radius of the tilted kernel --------------------------------------


def moment_matrix(model: ModelSpec, alpha: float) -> np.ndarray:
    """M_ij = P_ij E[(A at regime j)^alpha] for finite-state kinds."""
    if model.kind not in FINITE_KINDS:
        raise Unsupported("moment matrix needs a finite regime chain")
    return model.transition * np.exp(model.per_state_log_moment(alpha))[None, :]


def _perron_root(mat: np.ndarray, tol: float = 1e-12, max_iter: int = 10 ** 5):
    """Dominant eigenvalue of a nonnegative matrix by power iteration."""
    n = mat.shape[0]
    v = np.full(n, 1.0 / n)
    lam = 1.0
    for _ in range(max_iter):
        w = mat @ v
        lam_new = w.sum()
        if lam_new <= 0.0:
            raise PowerIterationStall("iterate collapsed to zero")
        w /= lam_new
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)) and (
            np.abs(w - v).max() <= tol
        ):
            return float(lam_new), w
        v = w
        lam = lam_new
    raise PowerIterationStall(
        f"power iteration did not converge in {max_iter} steps; "
        "the chain may be periodic or reducible"
    )


def cgf_spectral(model: ModelSpec, alpha: float) -> float:
    """Limiting cgf as log of the Perron root of the moment matrix."""
    lam, _ = _perron_root(moment_matrix(model, float(alpha)))
    return float(np.log(lam))


# -- simulation ----------------------------------------------------------------


def mc_log_discount_sums(
    model, n, n_paths, seed, *, x0=None, truncation_M=None
) -> np.ndarray:
    """Cumulative log discounts S_n over n_paths plain-chain paths.

    Paths start from the stationary law unless x0 pins the start state.
    With truncation_M set, each per-step log discount is floored at
    -truncation_M (the left-truncated sums device for f unbounded below).
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if x0 is None:
        states = model.initial_vec(rng, n_paths)
    else:
        from .regeneration import _tile_x0

        states = _tile_x0(model, x0, n_paths)
    s = np.zeros(n_paths)
    floor = None if truncation_M is None else -float(truncation_M)
    for _ in range(n):
        states, log_a, _ = model.step_vec(states, rng)
        s += log_a if floor is None else np.maximum(log_a, floor)
    return s


def _cgf_from_sums(s, alpha, n, n_batches):
    npaths = s.shape[0]
    w = alpha * s
    value = (logsumexp(w) - np.log(npaths)) / n
    m = npaths // n_batches
    per = w[: m * n_batches].reshape(n_batches, m)
    lam_k = (logsumexp(per, axis=1) - np.log(m)) / n
    se = float(lam_k.std(ddof=1) / np.sqrt(n_batches))
    ess = float(np.exp(2.0 * logsumexp(w) - logsumexp(2.0 * w)))
    return float(value), se, ess


def cgf_mc(
    model,
    alpha,
    n=200,
    n_paths=10 ** 5,
    truncation_M=None,
    seed=0,
    *,
    x0=None,
    n_batches=32,
):
    """Simulation estimate of the limiting cgf at one alpha.

    Returns (value, std_error); the standard error comes from batch means
    over path groups (at least 30 batches).  An effective sample size
    under 1% of the paths means the exponential tilt is dominated by a few
    paths; the estimate is still returned, with a warning attached.
    """
    n_batches = max(30, int(n_batches))
    s = mc_log_discount_sums(
        model, int(n), int(n_paths), seed, x0=x0, truncation_M=truncation_M
    )
    value, se, ess = _cgf_from_sums(s, float(alpha), int(n), n_batches)
    if ess < 0.01 * n_paths:
        warnings.warn(
            f"effective sample size {ess:.1f} of {n_paths} paths at "
            f"alpha={alpha:g}; the tilt is dominated by few paths",
            EffectiveSampleCollapseWarning,
        )
    return value, se


def mc_stability_diagnostic(model, alpha, n, n_paths, seed, **kw):
    """n-doubling check: Lambda estimated at n and 2n should agree.

    Returns a dict with both estimates and whether they differ by at most
    two pooled standard errors.
    """
    v1, se1 = cgf_mc(model, alpha, n, n_paths, seed=seed, **kw)
    v2, se2 = cgf_mc(model, alpha, 2 * n, n_paths, seed=seed + 1, **kw)
    pooled = float(np.hypot(se1, se2))
    return {
        "lambda_n": v1,
        "lambda_2n": v2,
        "pooled_se": pooled,
        "stable": bool(abs(v1 - v2) <= 2.0 * pooled or pooled == 0.0),
    }


# -- quadrature discretization of the tilted kernel ----------------------------


def _kernel_perron(model, alpha, half_width, n_points):
    nodes, weights = np.polynomial.legendre.leggauss(int(n_points))
    y = half_width * nodes
    w = half_width * weights
    if model.kind == Kind.IID_LOG_NORMAL:
        dens = np.exp(-0.5 * y * y) / np.sqrt(2.0 * np.pi)
        amp = np.exp(alpha * (-model.m + np.sqrt(model.sigma_sq) * y))
        return float((w * dens * amp).sum())
    if model.kind == Kind.GARCH11:
        dens = np.exp(-0.5 * y * y) / np.sqrt(2.0 * np.pi)
        amp = (model.b1[0] + model.a1[0] * y * y) ** alpha
        return float((w * dens * amp).sum())
    if model.kind == Kind.AR1_LOG_RETURN:
        sd = model.innovation_sd
        resid = (y[None, :] - model.c * y[:, None]) / sd
        dens = np.exp(-0.5 * resid * resid) / (sd * np.sqrt(2.0 * np.pi))
        mat = dens * np.exp(alpha * (y - model.mu))[None, :] * w[None, :]
        lam, _ = _perron_root(mat, tol=1e-13)
        return lam
    raise Unsupported(f"kernel discretization not available for kind {model.kind}")


def cgf_discretized_kernel(
    model,
    alpha,
    domain_half_width=12.0,
    grid_points=800,
    *,
    recheck=True,
    recheck_tol=1e-4,
) -> float:
    """Limiting cgf via Gauss-Legendre discretization of the tilted kernel.

    The state space is truncated to [-L, L] with L = domain_half_width; a
    second pass at 1.25 L guards against the truncation mattering.
    """
    a = float(alpha)
    lam = _kernel_perron(model, a, float(domain_half_width), grid_points)
    if recheck:
        lam2 = _kernel_perron(model, a, 1.25 * float(domain_half_width), grid_points)
        diff = abs(np.log(lam2) - np.log(lam))
        if diff > recheck_tol:
            raise TruncationDominance(
                f"cgf moved by {diff:.2e} when the truncation window grew by "
                "25%; increase domain_half_width or grid_points"
            )
    return float(np.log(lam))


# -- grid evaluation and cgf factories -----------------------------------------


def make_cgf(model, method="auto", **kwargs):
    """Build a callable alpha -> (value, std_error) for one route.

    The simulation route draws its paths once and reuses them for every
    alpha, so the returned function is a smooth deterministic surface (the
    common-random-numbers device root finding needs).  The chosen route is
    exposed as the function's `method` attribute.
    """
    if method == "auto":
        if model.kind in _ANALYTIC_KINDS:
            method = "analytic"
        elif model.kind in FINITE_KINDS:
            method = "spectral"
        else:
            method = "monte_carlo"
    if method == "analytic":
        fn = lambda a: (cgf_analytic(model, a), 0.0)
    elif method == "spectral":
        fn = lambda a: (cgf_spectral(model, a), 0.0)
    elif method == "discretized_kernel":
        fn = lambda a: (cgf_discretized_kernel(model, a, **kwargs), 0.0)
    elif method == "monte_carlo":
        n = int(kwargs.pop("n", 200))
        n_paths = int(kwargs.pop("n_paths", 10 ** 5))
        seed = kwargs.pop("seed", 0)
        truncation_M = kwargs.pop("truncation_M", None)
        x0 = kwargs.pop("x0", None)
        n_batches = max(30, int(kwargs.pop("n_batches", 32)))
        if kwargs:
            raise TypeError(f"unknown monte_carlo options {sorted(kwargs)}")
        s = mc_log_discount_sums(
            model, n, n_paths, seed, x0=x0, truncation_M=truncation_M
        )
        state = {"warned": False}

        def fn(a, _s=s, _n=n, _k=n_batches, _state=state):
            value, se, ess = _cgf_from_sums(_s, float(a), _n, _k)
            if ess < 0.01 * _s.shape[0] and not _state["warned"]:
                _state["warned"] = True
                warnings.warn(
                    f"effective sample size {ess:.1f} of {_s.shape[0]} paths "
                    f"at alpha={a:g}; estimates past this tilt are biased low",
                    EffectiveSampleCollapseWarning,
                )
            return value, se

        fn.path_sums = s
        fn.n_steps = n
    else:
        raise ValueError(f"unknown cgf method {method!r}")
    fn.method = method
    return fn


def estimate_cgf(model, alpha_grid, method="auto", **kwargs) -> CgfEstimate:
    """Evaluate one cgf route on a grid of alphas."""
    fn = make_cgf(model, method, **kwargs)
    grid = np.asarray(alpha_grid, dtype=float)
    vals = np.empty(grid.shape[0])
    ses = np.empty(grid.shape[0])
    for i, a in enumerate(grid):
        vals[i], ses[i] = fn(float(a))
    return CgfEstimate(
        alpha_grid=grid,
        lambda_values=vals,
        std_errors=ses,
        method=fn.method,
        truncation_M=kwargs.get("truncation_M"),
    )


# -- root finding ---------------------------------------------------------------


def _as_pair(cgf, a):
    out = cgf(a)
    if isinstance(out, tuple):
        return float(out[0]), float(out[1])
    return float(out), 0.0


def solve_exponent(cgf, bracket_hint=None, *, tol=1e-10, method=None) -> TailSolution:
    """Positive root of a convex cgf with cgf(0) = 0 by bisection.

    cgf maps alpha to a value or a (value, std_error) pair.  Deterministic
    routes are bisected until the residual is at most tol; stochastic ones
    stop once the midpoint value is within two standard errors of zero
    (the noise floor).  The probe at small alpha must be negative (mean
    log discount below zero), else there is no positive root.
    """
    eps = 1e-8
    v, _ = _as_pair(cgf, eps)
    if v >= 0.0:
        v2, _ = _as_pair(cgf, eps * 1e-4)
        if v2 >= 0.0:
            raise NoPositiveRoot(
                "cgf is nonnegative near zero; the drift condition fails"
            )
        eps = eps * 1e-4
    if bracket_hint is not None:
        lo, hi = float(bracket_hint[0]), float(bracket_hint[1])
        if lo <= 0.0:
            lo = eps
        vlo, _ = _as_pair(cgf, lo)
        if vlo >= 0.0:
            lo = eps
    else:
        lo, hi = eps, 1.0
    vhi, _ = _as_pair(cgf, hi)
    while vhi <= 0.0:
        lo = hi
        hi *= 2.0
        if hi > ALPHA_CAP:
            raise NoUpperBracket(
                f"cgf stayed nonpositive out to alpha = {ALPHA_CAP:g}; "
                "the exponent may be infinite"
            )
        vhi, _ = _as_pair(cgf, hi)
    bracket = (float(lo), float(hi))
    mid, vmid, semid = lo, -1.0, 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        vmid, semid = _as_pair(cgf, mid)
        if semid > 0.0 and abs(vmid) <= 2.0 * semid:
            break
        if semid == 0.0 and abs(vmid) <= tol:
            break
        if vmid > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            vmid, semid = _as_pair(cgf, mid)
            break
    label = method or getattr(cgf, "method", "unknown")
    return TailSolution(
        exponent=float(mid),
        method=label,
        bracket=bracket,
        residual=float(abs(vmid)),
        std_error=float(semid),
    )


# -- cycle moments ---------------------------------------------------------------


def _block_log_discounts(blocks):
    if isinstance(blocks, BlockArrays):
        if blocks.is_initial:
            raise ValueError("cycle moment equation needs regular cycles")
        return np.asarray(blocks.s_check, dtype=float)
    return np.asarray([b.s_check for b in blocks], dtype=float)


def _cycle_root(s, bracket):
    n = s.shape[0]
    logn = np.log(n)

    def f(a):
        return logsumexp(a * s) - logn

    lo = 1e-8 if bracket is None else max(float(bracket[0]), 1e-12)
    flo = f(lo)
    while flo >= 0.0:
        lo *= 1e-2
        if lo < 1e-30:
            raise NoPositiveRoot(
                "cycle moment function has no negative dip near zero"
            )
        flo = f(lo)
    hi = max(1.0, 2.0 * lo) if bracket is None else float(bracket[1])
    fhi = f(hi)
    while fhi <= 0.0:
        hi *= 2.0
        if hi > ALPHA_CAP:
            raise NoUpperBracket(
                "empirical cycle moments never cross 1; exponent out of reach"
            )
        fhi = f(hi)
    lo_b, hi_b = lo, hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= 1e-12 or hi - lo <= 1e-14 * max(1.0, hi):
            return float(mid), (float(lo_b), float(hi_b)), float(f(mid))
        if fm > 0.0:
            hi = mid
        else:
            lo = mid
    mid = 0.5 * (lo + hi)
    return float(mid), (float(lo_b), float(hi_b)), float(f(mid))


def _ess(s, alpha):
    w = np.exp(alpha * s - (alpha * s).max())
    return float(w.sum() ** 2 / (w * w).sum())


def solve_eta_cycles(
    blocks,
    alpha_bracket=None,
    *,
    n_boot=400,
    seed=0,
    ci_level=0.95,
) -> TailSolution:
    """Root of log mean A_check^alpha = 0 over regeneration cycles.

    blocks must be regular cycles (entry state drawn from nu), not the
    initial block.  The root equals the tail exponent of the recursion.
    The standard error and confidence interval come from a multinomial
    bootstrap over cycles (at least 200 resamples).  A collapsed effective
    sample size, at the bracket top or at the root, raises rather than
    returning a number the data cannot support.
    """
    s = _block_log_discounts(blocks)
    n = s.shape[0]
    if n < 2:
        raise ValueError("need at least two cycles")
    if alpha_bracket is not None and _ess(s, float(alpha_bracket[1])) < max(
        0.01 * n, 10.0
    ):
        raise EffectiveSampleCollapse(
            "tilted cycle moments at the bracket top are dominated by a few "
            "blocks; narrow the bracket"
        )
    root, bracket, resid = _cycle_root(s, alpha_bracket)
    ess = _ess(s, root)
    if ess < max(0.01 * n, 10.0):
        raise EffectiveSampleCollapse(
            f"effective sample size {ess:.1f} of {n} cycles at the root"
        )
    n_boot = max(200, int(n_boot))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    logn = np.log(n)
    roots = np.full(n_boot, np.nan)
    for k in range(n_boot):
        counts = rng.multinomial(n, np.full(n, 1.0 / n))
        nz = counts > 0
        sb = s[nz]
        logc = np.log(counts[nz].astype(float))

        def fb(a, _sb=sb, _lc=logc):
            return logsumexp(a * _sb + _lc) - logn

        try:
            lo = 1e-8
            while fb(lo) >= 0.0:
                lo *= 1e-2
                if lo < 1e-30:
                    raise NoPositiveRoot("resample has no dip")
            hi = max(1.0, 2.0 * lo)
            while fb(hi) <= 0.0:
                hi *= 2.0
                if hi > ALPHA_CAP:
                    raise NoUpperBracket("resample never crosses")
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                fm = fb(mid)
                if abs(fm) <= 1e-10 or hi - lo <= 1e-12 * max(1.0, hi):
                    break
                if fm > 0.0:
                    hi = mid
                else:
                    lo = mid
            roots[k] = 0.5 * (lo + hi)
        except (NoPositiveRoot, NoUpperBracket):
            pass
    bad = int(np.isnan(roots).sum())
    if bad > 0.1 * n_boot:
        raise EffectiveSampleCollapse(
            f"{bad} of {n_boot} bootstrap resamples had no positive root; "
            "the cycle sample is too fragile for a confidence interval"
        )
    good = roots[~np.isnan(roots)]
    tail = 0.5 * (1.0 - ci_level)
    lo_q, hi_q = np.percentile(good, [100.0 * tail, 100.0 * (1.0 - tail)])
    return TailSolution(
        exponent=root,
        method="cycle_moment",
        bracket=bracket,
        residual=abs(resid),
        std_error=float(good.std(ddof=1)),
        ci=(float(lo_q), float(hi_q)),
        meta={
            "n_cycles": int(n),
            "ess_at_root": ess,
            "n_boot": n_boot,
            "n_failed_resamples": bad,
            "ci_level": float(ci_level),
        },
    )
