"""Ruin probabilities and tail exponents for Markov-modulated losses.

The driving state chain modulates a per-period discount factor A and loss
B; the discounted loss process W_n = sum_t (prod_{s<t} A_s) B_t has a
power-law ruin probability P{sup_n W_n > u} ~ c u^{-r}. This package
builds the models, splits the chain into regeneration cycles, estimates
the exponent r by independent routes (closed forms, spectral radii,
simulation, cycle moments), and measures the ruin curve and its constant
by Monte Carlo.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    CycleOverflow,
    DegenerateMcheck,
    DiagnosticError,
    DimensionMismatch,
    EffectiveSampleCollapse,
    EffectiveSampleCollapseWarning,
    HorizonSuspectWarning,
    InsufficientTail,
    InvalidParameter,
    MarkovRuinError,
    MinorizationViolated,
    MissingRequired,
    ModelError,
    NoPositiveRoot,
    NoUpperBracket,
    NonContracting,
    NonStationary,
    ParseError,
    PowerIterationStall,
    QuadratureFailure,
    TooFewEvents,
    TruncationDominance,
    UnknownKey,
    UnknownKind,
    Unsupported,
)
from .models import (
    ChainState,
    Kind,
    LossSpec,
    MinorizationCert,
    ModelSpec,
    build_arp_block,
    check_minorization,
    clone_cert_with_delta,
    make_loss,
    make_model,
    minorize_ar1,
    minorize_model,
    stationary_distribution,
    step_chain,
)
from .regeneration import (
    BlockArrays,
    RegenBlock,
    SplitTrace,
    blocks_concat,
    blocks_to_w,
    carve_blocks,
    sample_blocks,
    simulate_cycle,
    simulate_initial_block,
    simulate_split_path,
    simulate_split_paths,
    split_marginal_check,
)
from .exponents import (
    CgfEstimate,
    TailSolution,
    cgf_analytic,
    cgf_discretized_kernel,
    cgf_mc,
    cgf_spectral,
    estimate_cgf,
    make_cgf,
    mc_log_discount_sums,
    mc_stability_diagnostic,
    moment_matrix,
    solve_eta_cycles,
    solve_exponent,
)
from .ruin import (
    GoldieEstimate,
    HillEstimate,
    PowerTailFit,
    RuinCurve,
    TailSampleSet,
    curve_from_samples,
    estimate_goldie_constant,
    estimate_ruin_curve,
    fit_power_tail,
    hill_estimator,
    sample_garch_stationary,
    sample_perpetuity,
    sample_w_sup,
    simulate_garch_stationary,
    simulate_perpetuity,
    simulate_w_sup,
    wilson_interval,
    with_fit,
)
from .config import RunConfig, load_config, parse_config, serialize_config
from .pipelines import RunResult, run
