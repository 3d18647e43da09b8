"""Command line entry point: ``hermite-equiv <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _load_config(path: str):
    from .experiment import ExperimentConfig

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_json(text)


def _write(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _report_notes(table) -> None:
    for cell in table.cells:
        for note in cell.notes:
            print(f"note [{table.axis}={cell.value!r}, {cell.activation}]: {note}", file=sys.stderr)
        for r in cell.failures:
            print(f"trial {r.trial_index} failed [{table.axis}={cell.value!r}, {cell.activation}]: {r.error}",
                  file=sys.stderr)


def cmd_run(args) -> int:
    from .experiment import emit, run_single

    cfg = _load_config(args.config)
    table = run_single(cfg, args.workers)
    _report_notes(table)
    _write(emit(table, args.format), args.out)
    return EXIT_NUMERICAL if not any(c.succeeded for c in table.cells) else EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import emit, run_sweep

    cfg = _load_config(args.config)
    table = run_sweep(cfg, args.axis, _floats(args.values), tuple(args.activations.split(",")), args.workers)
    _report_notes(table)
    _write(emit(table, args.format), args.out)
    return EXIT_OK


def cmd_external(args) -> int:
    from .experiment import emit, run_external

    cfg = _load_config(args.config)
    table, report = run_external(cfg, args.class_a, args.class_b, _floats(args.k_over_m),
                                 tuple(args.activations.split(",")), args.workers, args.nonzero_means)
    print(f"preprocess: n={report.n} t={report.t!r} scale={report.scale!r}", file=sys.stderr)
    _report_notes(table)
    _write(emit(table, args.format), args.out)
    return EXIT_OK


def cmd_hermite_coeffs(args) -> int:
    from .activations import get_activation
    from .hermite import gauss_hermite_rule, hermite_coefficients, residual_coefficient, split_legendre_rule

    sigma = get_activation(args.activation)
    rule = split_legendre_rule(args.order) if args.rule == "split" else gauss_hermite_rule(args.order)
    coeffs = hermite_coefficients(sigma, args.b, args.l, rule)
    residual = residual_coefficient(sigma, args.b, coeffs, rule)
    lines = ["j,h_j"] + [f"{j},{float(h)!r}" for j, h in enumerate(coeffs)] + [f"residual,{residual!r}"]
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .activations import get_activation
    from .diagnostics import scaling_diagnostic

    grid = [int(v) for v in _floats(args.grid)]
    report = scaling_diagnostic(grid, args.alpha, args.beta, args.trials, args.seed,
                                get_activation(args.activation), args.xi_mode, args.kappa_draws)
    _write(report.to_csv(), args.out)
    return EXIT_OK


def cmd_moments(args) -> int:
    from .activations import get_activation
    from .diagnostics import moment_equivalence

    res = moment_equivalence(args.n, args.k, args.alpha, args.beta, args.l, args.samples, args.seed,
                             get_activation(args.activation), args.component)
    lines = [
        "quantity,value",
        f"mean_gap,{res.mean_gap!r}",
        f"diag_gap,{res.diag_gap!r}",
        f"psd_change_sigma,{res.moments_sigma.psd_change!r}",
        f"psd_change_hermite,{res.moments_hermite.psd_change!r}",
        f"samples,{res.moments_sigma.sample_count}",
    ]
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .external import load_matrix, preprocess_external, write_gmix
    from .seeding import spawn_streams

    rng = spawn_streams(args.seed, ("preprocess",))["preprocess"]
    X, y, _, report = preprocess_external(load_matrix(args.class_a), load_matrix(args.class_b), rng,
                                          args.nonzero_means)
    write_gmix(args.out, np.column_stack([y, X]))
    lines = ["key,value"] + [f"{f.name},{getattr(report, f.name)!r}" for f in dataclasses.fields(report)]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hermite-equiv",
                                description="One-step trained networks versus their Hermite polynomial models.")
    sub = p.add_subparsers(dest="command", required=True)

    def table_opts(sp):
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--workers", type=int, default=None, help="process count (capped by HERMITE_EQUIV_THREADS)")

    sp = sub.add_parser("run", help="all trials of one config")
    table_opts(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="sweep one axis over relu, tanh and sigmoid")
    table_opts(sp)
    sp.add_argument("--axis", required=True,
                    help="KOverM, Alpha, Beta, MixtureRatio, Alignment, Rank, Lambda or EtaOverride")
    sp.add_argument("--values", required=True, help="comma-separated, monotone")
    sp.add_argument("--activations", default="relu,tanh,sigmoid")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("external", help="k/m sweep on two preprocessed class files")
    table_opts(sp)
    sp.add_argument("--class-a", required=True)
    sp.add_argument("--class-b", required=True)
    sp.add_argument("--k-over-m", default="0.25,0.5,1,2,3")
    sp.add_argument("--activations", default="relu,tanh,sigmoid")
    sp.add_argument("--nonzero-means", type=_bool, default=False)
    sp.set_defaults(func=cmd_external)

    sp = sub.add_parser("hermite-coeffs", help="Hermite coefficients and residual as CSV")
    sp.add_argument("--activation", choices=("relu", "tanh", "sigmoid", "identity"), required=True)
    sp.add_argument("--b", type=float, default=1.0)
    sp.add_argument("--l", type=int, required=True)
    sp.add_argument("--order", type=int, default=200)
    sp.add_argument("--rule", choices=("split", "gauss-hermite"), default="split")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_hermite_coeffs)

    sp = sub.add_parser("diagnose", help="log-log scaling slopes of the decomposition terms")
    sp.add_argument("--grid", default="256,512,1024,2048")
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--beta", type=float, required=True)
    sp.add_argument("--trials", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--activation", default="relu")
    sp.add_argument("--xi-mode", choices=("random", "spike_aligned"), default="spike_aligned")
    sp.add_argument("--kappa-draws", type=int, default=64)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("moments", help="conditional moments of sigma versus its Hermite model")
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--k", type=int, default=256)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--beta", type=float, default=0.6)
    sp.add_argument("--l", type=int, default=3)
    sp.add_argument("--samples", type=int, default=200_000)
    sp.add_argument("--activation", default="relu")
    sp.add_argument("--component", type=int, choices=(1, 2), default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_moments)

    sp = sub.add_parser("preprocess", help="preprocess two class files into one GMIX file")
    sp.add_argument("--class-a", required=True)
    sp.add_argument("--class-b", required=True)
    sp.add_argument("--out", required=True, help="GMIX output; column 0 holds the +1/-1 label")
    sp.add_argument("--nonzero-means", type=_bool, default=False)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_preprocess)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
