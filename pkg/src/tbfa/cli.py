"""Command-line entry point: ``tbfa <command> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 fit stopped at
``--tmax`` without converging (the report is still written), 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import mds
from .distributions import rng_stream
from .errors import (
    ConfigurationError,
    CorruptParameterError,
    DimensionError,
    DivergenceError,
    DomainError,
    EmptyDataError,
    FormatError,
    SelectionError,
    SingularInformationError,
)
from .estimation import ALGORITHMS, FitConfig, fit_best
from .inference import standard_errors
from .model import IdentificationWarning, TbfaParams, factor_scores, max_factors
from .selection import bic, grid_select
from .simbench import (
    FAMILIES,
    SITUATIONS,
    GeneratorSpec,
    OutlierSpec,
    accuracy_study,
    convergence_study,
    generate,
    inject_outliers,
    robustness_study,
)

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 2, 3, 4

KIND_ALIASES = {
    "data1": "bfa_data1",
    "data2": "bfa_data2",
    "data3": "bfa_data3",
    "accuracy": "tbfa_accuracy",
}


class UsageError(Exception):
    """Bad flags or unusable input files; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _algorithm(name: str) -> str:
    key = name.upper()
    if key not in ALGORITHMS:
        raise UsageError(f"unknown algorithm {name!r}; choose from {', '.join(ALGORITHMS)}")
    return key


def _kind(name: str) -> str:
    return KIND_ALIASES.get(name.lower(), name.lower())


def parse_range(text: str) -> list[int]:
    """``"3"`` -> [3]; ``"1-4"`` -> [1, 2, 3, 4]; ``"1,3"`` -> [1, 3]."""
    out: list[int] = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-"))
                if lo > hi:
                    raise UsageError(f"malformed range {text!r}: {lo} > {hi}")
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
    except ValueError as exc:
        raise UsageError(f"malformed range {text!r}") from exc
    if not out or min(out) < 0:
        raise UsageError(f"malformed range {text!r}")
    return sorted(set(out))


def _load_data(path):
    labels = Path(str(path) + ".labels")
    try:
        return mds.read_dataset(path, labels if labels.exists() else None)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except (FormatError, CorruptParameterError, DimensionError, EmptyDataError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _load_params(path) -> TbfaParams:
    try:
        return mds.read_params(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except FormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _check_factor_counts(d_c: int, d_r: int, q_c: int, q_r: int) -> None:
    for q, d, side, flag in ((q_c, d_c, "column", "--qc"), (q_r, d_r, "row", "--qr")):
        if q < 0 or q > max_factors(d):
            raise UsageError(f"{flag} {q} is not allowed for {side} dimension {d}: "
                             f"max_factors({d}) = {max_factors(d)}")


def _num(v: float):
    """JSON-safe float: infinities and NaN become strings."""
    v = float(v)
    if math.isfinite(v):
        return v
    return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")


def params_to_json(p: TbfaParams) -> dict:
    return {
        "W": p.W.tolist(), "C": p.C.tolist(), "Psi_c": p.Psi_c.tolist(),
        "R": p.R.tolist(), "Psi_r": p.Psi_r.tolist(),
        "nu": _num(p.nu), "gaussian": p.gaussian,
    }


def _write_json(path, obj) -> None:
    mds.atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    mds.atomic_write(path, buf.getvalue())


def _fit_config(args, **extra) -> FitConfig:
    try:
        return FitConfig(algorithm=_algorithm(args.algorithm), tol=args.tol, t_max=args.tmax,
                         seed=args.seed, gaussian_mode=args.gaussian, **extra)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    kind = _kind(args.kind)
    overrides = {}
    if args.nu is not None:
        overrides["nu"] = args.nu
    if args.d_c is not None:
        overrides["d_c"] = args.d_c
    try:
        spec = GeneratorSpec(kind, args.n, overrides)
        outliers = OutlierSpec.parse(args.contaminate) if args.contaminate else None
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    rng = rng_stream(args.seed)
    data, truth = generate(spec, rng)
    if outliers is not None:
        data = inject_outliers(data, truth, outliers, rng)
    out = Path(args.out)
    mds.write_dataset(out, data, binary=args.binary)
    mds.write_labels(str(out) + ".labels", data.labels)
    mds.write_params(str(out) + ".params", truth)
    return EXIT_OK


def cmd_fit(args) -> int:
    data = _load_data(args.data)
    _check_factor_counts(data.d_c, data.d_r, args.qc, args.qr)
    cfg = _fit_config(args, convention=args.convention)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IdentificationWarning)
        res = fit_best(data, args.qc, args.qr, cfg, args.restarts)
    report = {
        "algorithm": res.algorithm,
        "q_c": args.qc,
        "q_r": args.qr,
        "n": data.n,
        "params": params_to_json(res.params),
        "loglik": res.loglik,
        "loglik_trace": res.loglik_trace.tolist(),
        "iterations": res.iterations,
        "converged": res.converged,
        "nu_saturated": res.nu_saturated,
        "bic": bic(res, data),
        "tau": res.final_tau.tolist(),
    }
    if not args.omit_timing:
        report["timing"] = {"elapsed_seconds": res.elapsed_seconds,
                            "time_trace": res.time_trace.tolist()}
    _write_json(args.out, report)
    if args.params_out:
        mds.write_params(args.params_out, res.params)
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def cmd_select(args) -> int:
    data = _load_data(args.data)
    qcs, qrs = parse_range(args.qc_range), parse_range(args.qr_range)
    for qc in qcs:
        _check_factor_counts(data.d_c, data.d_r, qc, 0)
    for qr in qrs:
        _check_factor_counts(data.d_c, data.d_r, 0, qr)
    cfg = _fit_config(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IdentificationWarning)
        report = grid_select(data, qcs, qrs, cfg, restarts=args.restarts)
    surface = [{k: (_num(v) if isinstance(v, float) else v) for k, v in cell.items()}
               for cell in report.surface()]
    _write_json(args.out, {"best": list(report.best), "surface": surface})
    return EXIT_OK


def cmd_scores(args) -> int:
    data = _load_data(args.data)
    params = _load_params(args.params)
    if (data.d_c, data.d_r) != (params.d_c, params.d_r):
        raise UsageError(f"data are {data.d_c}x{data.d_r} but parameters are "
                         f"{params.d_c}x{params.d_r}")
    z = factor_scores(params, data.observations)
    mds.write_dataset(args.out, z, binary=args.binary)
    return EXIT_OK


def cmd_stderr(args) -> int:
    params = _load_params(args.params)
    if args.n < 1:
        raise UsageError("--n must be positive")
    se = standard_errors(params, args.n, convention=args.convention)
    _write_json(args.out, {"n": args.n, "standard_errors": se})
    return EXIT_OK


def cmd_bench(args) -> int:
    alg = _algorithm(args.algorithm)
    if args.study == "convergence":
        kinds = [_kind(k) for k in args.kinds.split(",")]
        out = convergence_study(kinds, seed=args.seed, n=args.n, d_c_data3=args.d_c_data3,
                                tol=args.tol, t_max=args.tmax)
        if args.omit_timing:
            for runs in out.values():
                for run in runs.values():
                    run.pop("elapsed_seconds")
                    run.pop("seconds")
        _write_json(args.out, out)
    elif args.study == "robustness":
        p_values = [float(v) for v in args.p.split(",")]
        families = [f.upper() for f in args.family.split(",")]
        situations = [s.upper() for s in args.situation.split(",")]
        bad = [f for f in families if f not in FAMILIES] + \
              [s for s in situations if s not in SITUATIONS]
        if bad:
            raise UsageError(f"unknown family/situation {bad}")
        methods = args.methods.split(",")
        rows = robustness_study(p_values, families, situations, methods, reps=args.reps,
                                seed=args.seed, n=args.n or 1000, algorithm=alg)
        _write_csv(args.out, ["method", "p", "relerr_x100", "relerr", "family", "situation", "reps"],
                   [[r["method"], r["p"], r["relerr_x100"], r["relerr"], r["family"],
                     r["situation"], r["reps"]] for r in rows])
    else:
        reps = {}
        for item in args.reps_by_n.split(","):
            n, r = item.split(":")
            reps[int(n)] = int(r)
        res = accuracy_study(reps, seed=args.seed, algorithm=alg)
        _write_csv(args.out, ["n", "parameter", "truth", "rmse", "estd", "imse"],
                   [[n, name, v["truth"], v["rmse"], v["estd"], v["imse"]]
                    for n, table in res.items() for name, v in table.items()])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_fit_flags(p, tmax: int = 1000) -> None:
    p.add_argument("--algorithm", default="PX-ECME", help="ECME, PX-ECME, AECM or PX-AECM")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--tmax", type=int, default=tmax)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussian", action="store_true", help="fit the matrix-normal model")
    p.add_argument("--restarts", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tbfa", description="Bilinear factor analysis for matrix data")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--kind", required=True, help="data1, data2, data3 or accuracy")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--contaminate", help="FAMILY:SITUATION:P, e.g. FC:I:0.05")
    p.add_argument("--nu", type=float, help="t degrees of freedom (default: recipe's own)")
    p.add_argument("--d-c", dest="d_c", type=int, help="column dimension for data3")
    p.add_argument("--binary", action="store_true", help="write the MDSB binary variant")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model and write a JSON report")
    p.add_argument("--data", required=True)
    p.add_argument("--qc", type=int, required=True)
    p.add_argument("--qr", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params-out", help="also write the fitted parameters in parameter-file form")
    p.add_argument("--convention", choices=("lower", "reversed"), default="lower")
    p.add_argument("--omit-timing", action="store_true", help="leave wall-clock data out of the report")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="BIC grid search over factor counts")
    p.add_argument("--data", required=True)
    p.add_argument("--qc-range", required=True, help='e.g. "1-4" or "1,3"')
    p.add_argument("--qr-range", required=True)
    p.add_argument("--out", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_select, restarts=3)

    p = sub.add_parser("scores", help="posterior factor-score matrices")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("stderr", help="information-based standard errors")
    p.add_argument("--params", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--convention", choices=("lower", "reversed"), default="lower")
    p.set_defaults(func=cmd_stderr)

    p = sub.add_parser("bench", help="simulation studies")
    p.add_argument("study", choices=("convergence", "robustness", "accuracy"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--algorithm", default="PX-ECME")
    p.add_argument("--n", type=int, help="sample size (convergence, robustness)")
    p.add_argument("--kinds", default="data1,data2", help="convergence: recipes to run")
    p.add_argument("--d-c-data3", dest="d_c_data3", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--tmax", type=int, default=1000)
    p.add_argument("--omit-timing", action="store_true")
    p.add_argument("--family", default="FC", help="robustness: comma-separated families")
    p.add_argument("--situation", default="I", help="robustness: comma-separated situations")
    p.add_argument("--p", default="0.005,0.01,0.02,0.05,0.09", help="robustness: proportions")
    p.add_argument("--methods", default="tBFA,BFA,tFA,FA")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--reps-by-n", dest="reps_by_n", default="100:100,500:100,5000:25",
                   help="accuracy: N:REPS pairs")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"tbfa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, SingularInformationError, CorruptParameterError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"tbfa: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DimensionError, DomainError, ConfigurationError, FormatError, EmptyDataError,
            SelectionError, ValueError) as exc:
        print(f"tbfa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
