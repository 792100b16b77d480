"""Command line front end.

    gossipsgd run <config>
    gossipsgd validate-bounds <config>
    gossipsgd diagnose-mixing --p N --beta B

Exit codes: 0 success, 1 bound validation failed, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import mixing as X
from .config import ConfigError, load_config
from .experiment import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, OUTPUT_ENV, run_experiment
from .objectives import DatasetError

log = logging.getLogger("gossipsgd")


def _fmt_matrix(a: np.ndarray) -> str:
    return np.array2string(a, precision=6, suppress_small=True, max_line_width=120)


def emit_matrix_diagnostics(p: int, beta: float) -> str:
    """Closed-form vs enumerated second moments, their max difference, and both lambdas."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if p > X.ASYNC_ENUM_MAX_P:
        raise ValueError(f"p={p} beyond the enumeration limit (async p <= {X.ASYNC_ENUM_MAX_P})")
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    out = [f"p = {p}, beta = {beta}"]
    if p <= X.PULL_ENUM_MAX_P:
        closed = X.expected_second_moment_pull(p)
        enum = X.enumerate_second_moment_pull(p)
        out += [
            "", "E[M^T M] closed form:", _fmt_matrix(closed),
            f"E[M^T M] enumerated over {p}^{p} assignments:", _fmt_matrix(enum),
            f"max |diff| = {np.max(np.abs(closed - enum)):.3e}",
        ]
    else:
        out += ["", f"E[M^T M]: enumeration skipped (p > {X.PULL_ENUM_MAX_P})"]
    closed = X.expected_second_moment_async(p, beta)
    enum = X.enumerate_second_moment_async(p, beta)
    for name, c, e in zip(("E[D^T D]", "E[D^T 11^T D]", "consensus operator"), closed, enum):
        out += [
            "", f"{name} closed form:", _fmt_matrix(c),
            f"{name} enumerated over {p * p} pairs:", _fmt_matrix(e),
            f"max |diff| = {np.max(np.abs(c - e)):.3e}",
        ]
    lam = X.lambda_variants(p, beta)
    out += ["", f"lambda_theorem = {lam['theorem']:.6g}", f"lambda_diag = {lam['diagonalization']:.6g}"]
    return "\n".join(out) + "\n"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gossipsgd", description="Gossip and all-reduce SGD experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment and write its outputs")
    r.add_argument("config")
    v = sub.add_parser("validate-bounds", help="run an ensemble and check it against the convergence bounds")
    v.add_argument("config")
    d = sub.add_parser("diagnose-mixing", help="print closed-form vs enumerated mixing moments")
    d.add_argument("--p", type=int, required=True)
    d.add_argument("--beta", type=float, required=True)
    ap.epilog = f"Set {OUTPUT_ENV} to override the config's output_dir."
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "diagnose-mixing":
        try:
            sys.stdout.write(emit_matrix_diagnostics(args.p, args.beta))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        res = run_experiment(cfg, force_bounds=args.cmd == "validate-bounds")
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # everything else is a runtime failure with context
        log.debug("run failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    s = res.summary
    print(f"{s['protocol']} x {s['trials']} trial(s) on {s['backend']}: "
          f"final sq_err_opt {s['final']['sq_err_opt_mean']:.6g}, "
          f"sq_err_consensus {s['final']['sq_err_consensus_mean']:.6g}")
    for name, path in res.files.items():
        print(f"  {name}: {path}")
    if res.bound_report is not None:
        for rep in res.bound_report["reports"]:
            verdict = "pass" if rep["pass"] else f"FAIL ({len(rep['violations'])} violations)"
            print(f"  {rep['bound_kind']} [{rep['lambda_variant']}]: {verdict}, worst ratio {rep['worst_ratio']:.4f}")
        for rep in res.bound_report["side_by_side"]:
            verdict = "pass" if rep["pass"] else "fail"
            print(f"  {rep['bound_kind']} [{rep['lambda_variant']}] (informational): {verdict}")
        if args.verbose:
            print(json.dumps(res.bound_report, indent=2))
    return res.exit_status


if __name__ == "__main__":
    sys.exit(main())
