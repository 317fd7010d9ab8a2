"""Command line front end.

Heavy imports happen after thread limits are applied, so --threads (or
MARKOV_RUIN_THREADS) can cap the BLAS/OpenMP pools before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MODEL = 3
EXIT_DIAGNOSTIC = 4
EXIT_INTERNAL = 5

_EXIT_DOC = """\
exit codes:
  0  success
  2  config error: unreadable file, bad TOML, unknown key, missing seed
  3  model validation error: unknown kind, bad parameter, nonstationary chain
  4  statistical diagnostic failure: violated minorization, collapsed
     effective sample size, unresolvable truncation, failed verify checks
  5  internal error
"""

_COMMANDS = (
    ("solve", "estimate the tail exponent by every applicable route"),
    ("ruin", "simulate the ruin probability curve and fit its power law"),
    ("perpetuity", "sample the limiting discounted loss sum"),
    ("garch", "sample the stationary squared volatility"),
    ("verify", "run the invariant suite against one model"),
    ("minorize", "build and check a minorization certificate"),
)

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="markov-ruin",
        description="Ruin probabilities and tail exponents for "
        "Markov-modulated discounted loss processes.",
        epilog=_EXIT_DOC,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS:
        sp = sub.add_parser(
            name,
            help=help_text,
            description=help_text,
            epilog=_EXIT_DOC,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        sp.add_argument("--config", required=True, metavar="FILE",
                        help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override the config seed")
        sp.add_argument("--paths", type=int, default=None, metavar="N",
                        help="override n_paths")
        sp.add_argument("--horizon", type=int, default=None, metavar="N",
                        help="override the simulation horizon")
        sp.add_argument("--out", default=None, metavar="DIR",
                        help="override output_dir")
        sp.add_argument("--threads", type=int, default=None, metavar="N",
                        help="cap worker threads (fallback: MARKOV_RUIN_THREADS)")
    return parser


def _resolve_threads(arg_threads):
    """--threads wins; the env var is the fallback. Applied before numpy."""
    from .errors import ParseError

    threads = arg_threads
    if threads is None:
        env = os.environ.get("MARKOV_RUIN_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ParseError(
                    f"MARKOV_RUIN_THREADS must be an integer, got {env!r}"
                ) from None
    if threads is None:
        return None
    if threads < 1:
        raise ParseError(f"thread count must be >= 1, got {threads}")
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)
    return threads


def _print_summary(result) -> None:
    res = result.manifest.get("results", {})
    for record in res.get("exponents", ()):
        if "exponent" in record:
            line = f"exponent[{record['method']}] = {record['exponent']:.10g}"
            if record.get("ci"):
                lo, hi = record["ci"]
                line += f"  (95% CI {lo:.6g} .. {hi:.6g})"
            print(line)
        else:
            print(f"exponent[{record['method']}]: {record.get('error')}")
    if "cross_check" in res:
        verdict = "agree" if res["cross_check"]["agree"] else "DISAGREE"
        print(f"cross-check: routes {verdict}")
    if "fit" in res:
        fit = res["fit"]
        print(
            f"power-law fit: slope {fit['slope']:.6g}, "
            f"flatness {fit['flatness']:.4g} over {fit['n_points']} levels"
        )
    if "hill" in res:
        hill = res["hill"]
        lo, hi = hill["ci"]
        print(
            f"hill index = {hill['index']:.6g} "
            f"(k={hill['k']}, 95% CI {lo:.6g} .. {hi:.6g})"
        )
    if "certificate" in res:
        cert = res["certificate"]
        print(
            f"certificate: delta = {cert['delta']:.10g} "
            f"at level {cert['a_level']:.6g}"
        )
        check = res.get("check", {})
        if "worst_margin" in check:
            print(
                f"check: worst margin {check['worst_margin']:.3e} "
                f"over {check['n_checked']} state/set pairs"
            )
        elif "skipped" in check:
            print(f"check skipped: {check['skipped']}")
    if "verify" in res:
        checks = res["verify"]["checks"]
        ran = [c for c in checks if not c.get("skipped")]
        passed = sum(1 for c in ran if c["pass"])
        print(f"verify: {passed}/{len(ran)} checks passed")
        for c in ran:
            if not c["pass"]:
                print(f"  FAIL {c['name']}: {c['detail']}")
    for flag in result.manifest.get("diagnostics", ()):
        print(f"warning [{flag['flag']}]: {flag['message']}")
    for name in sorted(result.files):
        print(f"wrote {result.files[name]}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .errors import (
        ConfigError,
        DiagnosticError,
        MarkovRuinError,
        ModelError,
        ParseError,
    )

    try:
        threads = _resolve_threads(args.threads)

        import dataclasses

        from .config import load_config
        from .pipelines import run

        cfg = load_config(args.config, experiment_override=args.command)
        overrides = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ParseError(f"--seed must fit in 64 bits, got {args.seed}")
            overrides["seed"] = args.seed
        if args.paths is not None:
            if args.paths < 1:
                raise ParseError(f"--paths must be >= 1, got {args.paths}")
            overrides["n_paths"] = args.paths
        if args.horizon is not None:
            if args.horizon < 1:
                raise ParseError(f"--horizon must be >= 1, got {args.horizon}")
            overrides["horizon"] = args.horizon
        if args.out is not None:
            overrides["output_dir"] = args.out
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)

        result = run(cfg, threads=threads)
        _print_summary(result)
        return result.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except DiagnosticError as exc:
        print(f"diagnostic failure: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTIC
    except MarkovRuinError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # anything unclassified is an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
