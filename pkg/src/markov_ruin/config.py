"""Run configuration: strict TOML schema, defaults, round-trip serializer.

Schema (key = value with nested tables)::

    experiment = "ruin"        # solve | ruin | perpetuity | garch | verify | minorize
    seed = 42                  # required, 64-bit unsigned; no wall-clock default
    n_paths = 100000
    horizon = 10000
    n_cycles = 100000
    burn_in = 1000             # garch warm-up steps
    tol = 1e-9                 # perpetuity stopping tolerance
    output_dir = "runs"
    dump_blocks = false        # also write blocks.tsv where cycles are sampled

    [model]
    kind = "ar1_log_return"
    c = 0.5
    mu = 2.0
    innovation_sd = 1.0

    [model.loss]               # optional; default normal(mean=-1, sd=1)
    dist = "normal"
    mean = -1.0
    sd = 1.0

    [minorization]             # optional
    a_level = 1.0
    delta = 0.25               # optional shrink of the certified level

    [u_grid]                   # optional; explicit levels or a quantile window
    levels = [1.0, 2.0, 4.0]
    # or: q_lo = 0.95, q_hi = 0.999, n_levels = 12

Unknown keys anywhere raise UnknownKey with the dotted path. Parameter
keys under [model] are checked against the kind's accepted set when the
kind itself is recognized; an unrecognized kind string is left for model
construction to reject so the error carries the model exit code.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import MissingRequired, ParseError, UnknownKey
from .models import KIND_PARAMS, LOSS_PARAMS, Kind

EXPERIMENTS = ("solve", "ruin", "perpetuity", "garch", "verify", "minorize")

_TOP_KEYS = (
    "experiment", "seed", "n_paths", "horizon", "n_cycles", "burn_in",
    "tol", "output_dir", "dump_blocks", "model", "minorization", "u_grid",
)
_MINORIZATION_KEYS = ("a_level", "delta")
_UGRID_KEYS = ("levels", "q_lo", "q_hi", "n_levels")

DEFAULTS = {
    "n_paths": 100_000,
    "horizon": 10_000,
    "n_cycles": 100_000,
    "burn_in": 1_000,
    "tol": 1e-9,
    "output_dir": "runs",
    "dump_blocks": False,
}


@dataclass(frozen=True)
class RunConfig:
    """Validated run description; everything the pipeline needs."""

    experiment: str
    seed: int
    model: dict
    n_paths: int = DEFAULTS["n_paths"]
    horizon: int = DEFAULTS["horizon"]
    n_cycles: int = DEFAULTS["n_cycles"]
    burn_in: int = DEFAULTS["burn_in"]
    tol: float = DEFAULTS["tol"]
    output_dir: str = DEFAULTS["output_dir"]
    dump_blocks: bool = DEFAULTS["dump_blocks"]
    a_level: Optional[float] = None
    delta: Optional[float] = None
    u_levels: Optional[tuple] = None
    quantile_window: Optional[tuple] = None  # (q_lo, q_hi, n_levels)

    def model_kind(self) -> str:
        return self.model.get("kind", "")


def _reject_unknown(table: dict, allowed, path: str) -> None:
    for key in table:
        if key not in allowed:
            dotted = f"{path}.{key}" if path else key
            raise UnknownKey(f"unknown config key {dotted!r}")


def _as_int(value, path: str, *, lo=None, hi=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"{path} must be an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ParseError(f"{path} must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ParseError(f"{path} must be <= {hi}, got {value}")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"{path} must be a number, got {value!r}")
    return float(value)


def _freeze(value, path: str):
    """Recursively convert parsed TOML values to hashable config atoms."""
    if isinstance(value, dict):
        return {k: _freeze(v, f"{path}.{k}") for k, v in value.items()}
    if isinstance(value, list):
        return tuple(_freeze(v, path) for v in value)
    if isinstance(value, (str, bool, int, float)):
        return value
    raise ParseError(f"{path} has unsupported value type {type(value).__name__}")


def _check_model_table(model: dict) -> dict:
    if "kind" not in model:
        raise MissingRequired("model.kind")
    kind = model["kind"]
    if not isinstance(kind, str):
        raise ParseError(f"model.kind must be a string, got {kind!r}")
    try:
        k = Kind(kind)
    except ValueError:
        # unknown kind string: leave key checking to make_model so the
        # failure is classified as a model error, not a config error
        return model
    allowed = set(KIND_PARAMS[k]) | {"kind", "loss"}
    _reject_unknown(model, allowed, "model")
    loss = model.get("loss")
    if loss is not None:
        if not isinstance(loss, dict):
            raise ParseError("model.loss must be a table")
        dist = loss.get("dist")
        if dist in LOSS_PARAMS:
            _reject_unknown(loss, set(LOSS_PARAMS[dist]) | {"dist"}, "model.loss")
    return model


def parse_config(text: str, *, experiment_override: Optional[str] = None) -> RunConfig:
    """Parse config text into a RunConfig with defaults filled.

    Strict mode: any key outside the published schema raises UnknownKey
    with its dotted path. experiment_override (the CLI subcommand) takes
    precedence over the experiment key and excuses its absence.
    """
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"config is not valid TOML: {exc}") from None

    _reject_unknown(raw, _TOP_KEYS, "")

    experiment = experiment_override or raw.get("experiment")
    if experiment is None:
        raise MissingRequired("experiment")
    if experiment not in EXPERIMENTS:
        raise ParseError(
            f"experiment must be one of {', '.join(EXPERIMENTS)}; got {experiment!r}"
        )

    if "seed" not in raw:
        raise MissingRequired("seed")
    seed = _as_int(raw["seed"], "seed", lo=0, hi=2**64 - 1)

    model = raw.get("model")
    if model is None:
        raise MissingRequired("model")
    if not isinstance(model, dict):
        raise ParseError("model must be a table")
    model = _check_model_table(model)

    n_paths = _as_int(raw.get("n_paths", DEFAULTS["n_paths"]), "n_paths", lo=1)
    horizon = _as_int(raw.get("horizon", DEFAULTS["horizon"]), "horizon", lo=1)
    n_cycles = _as_int(raw.get("n_cycles", DEFAULTS["n_cycles"]), "n_cycles", lo=1)
    burn_in = _as_int(raw.get("burn_in", DEFAULTS["burn_in"]), "burn_in", lo=1)
    tol = _as_float(raw.get("tol", DEFAULTS["tol"]), "tol")
    if not 0.0 < tol <= 1e-6:
        raise ParseError(f"tol must lie in (0, 1e-6], got {tol}")
    output_dir = raw.get("output_dir", DEFAULTS["output_dir"])
    if not isinstance(output_dir, str) or not output_dir:
        raise ParseError("output_dir must be a nonempty string")
    dump_blocks = raw.get("dump_blocks", DEFAULTS["dump_blocks"])
    if not isinstance(dump_blocks, bool):
        raise ParseError("dump_blocks must be a boolean")

    a_level = delta = None
    mino = raw.get("minorization")
    if mino is not None:
        if not isinstance(mino, dict):
            raise ParseError("minorization must be a table")
        _reject_unknown(mino, _MINORIZATION_KEYS, "minorization")
        if "a_level" in mino:
            a_level = _as_float(mino["a_level"], "minorization.a_level")
            if a_level <= 0:
                raise ParseError("minorization.a_level must be > 0")
        if "delta" in mino:
            delta = _as_float(mino["delta"], "minorization.delta")
            if not 0.0 < delta <= 1.0:
                raise ParseError("minorization.delta must lie in (0, 1]")

    u_levels = quantile_window = None
    ugrid = raw.get("u_grid")
    if ugrid is not None:
        if not isinstance(ugrid, dict):
            raise ParseError("u_grid must be a table")
        _reject_unknown(ugrid, _UGRID_KEYS, "u_grid")
        has_levels = "levels" in ugrid
        has_window = any(k in ugrid for k in ("q_lo", "q_hi", "n_levels"))
        if has_levels and has_window:
            raise ParseError("u_grid takes either levels or a quantile window, not both")
        if has_levels:
            levels = ugrid["levels"]
            if not isinstance(levels, list) or not levels:
                raise ParseError("u_grid.levels must be a nonempty array")
            vals = tuple(_as_float(v, "u_grid.levels") for v in levels)
            if any(not math.isfinite(v) or v <= 0 for v in vals):
                raise ParseError("u_grid.levels must be finite and > 0")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ParseError("u_grid.levels must be strictly increasing")
            u_levels = vals
        elif has_window:
            q_lo = _as_float(ugrid.get("q_lo", 0.95), "u_grid.q_lo")
            q_hi = _as_float(ugrid.get("q_hi", 0.999), "u_grid.q_hi")
            n_levels = _as_int(ugrid.get("n_levels", 12), "u_grid.n_levels", lo=2)
            if not 0.0 < q_lo < q_hi < 1.0:
                raise ParseError("u_grid window needs 0 < q_lo < q_hi < 1")
            quantile_window = (q_lo, q_hi, n_levels)
        else:
            raise ParseError("u_grid table must set levels or a quantile window")

    return RunConfig(
        experiment=experiment,
        seed=seed,
        model=_freeze(model, "model"),
        n_paths=n_paths,
        horizon=horizon,
        n_cycles=n_cycles,
        burn_in=burn_in,
        tol=tol,
        output_dir=output_dir,
        dump_blocks=dump_blocks,
        a_level=a_level,
        delta=delta,
        u_levels=u_levels,
        quantile_window=quantile_window,
    )


def load_config(path: str, *, experiment_override: Optional[str] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, experiment_override=experiment_override)


def _toml_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            return {float("inf"): "inf", float("-inf"): "-inf"}.get(value, "nan")
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_scalar(v) for v in value) + "]"
    raise ParseError(f"cannot serialize value {value!r}")


def _emit_table(lines, name, table):
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    if scalars or not subtables:
        lines.append(f"[{name}]")
        for key, val in scalars.items():
            lines.append(f"{key} = {_toml_scalar(val)}")
        lines.append("")
    for key, sub in subtables.items():
        _emit_table(lines, f"{name}.{key}", sub)


def serialize_config(cfg: RunConfig) -> str:
    """Emit TOML that parses back to an equal RunConfig."""
    lines = [f'experiment = "{cfg.experiment}"', f"seed = {cfg.seed}"]
    for key in ("n_paths", "horizon", "n_cycles", "burn_in"):
        lines.append(f"{key} = {getattr(cfg, key)}")
    lines.append(f"tol = {_toml_scalar(cfg.tol)}")
    lines.append(f"output_dir = {_toml_scalar(cfg.output_dir)}")
    lines.append(f"dump_blocks = {_toml_scalar(cfg.dump_blocks)}")
    lines.append("")
    _emit_table(lines, "model", cfg.model)
    if cfg.a_level is not None or cfg.delta is not None:
        lines.append("[minorization]")
        if cfg.a_level is not None:
            lines.append(f"a_level = {_toml_scalar(cfg.a_level)}")
        if cfg.delta is not None:
            lines.append(f"delta = {_toml_scalar(cfg.delta)}")
        lines.append("")
    if cfg.u_levels is not None:
        lines.append("[u_grid]")
        lines.append(f"levels = {_toml_scalar(list(cfg.u_levels))}")
        lines.append("")
    elif cfg.quantile_window is not None:
        q_lo, q_hi, n_levels = cfg.quantile_window
        lines.append("[u_grid]")
        lines.append(f"q_lo = {_toml_scalar(q_lo)}")
        lines.append(f"q_hi = {_toml_scalar(q_hi)}")
        lines.append(f"n_levels = {n_levels}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-dict echo for the run manifest (JSON-serializable)."""
    out = dataclasses.asdict(cfg)

    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return {k: plain(v) for k, v in out.items()}
