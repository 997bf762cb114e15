"""Command-line entry point: ``qvi {quantize,elbo,fit,benchmark,plotdata}``.

Every subcommand accepts ``--config FILE`` holding flat ``key = value``
lines; keys are flag names without the leading dashes (``-`` or ``_``
both accepted).  Flags given on the command line override the file.

Exit codes: 0 success, 2 usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import grid as qgrid
from .estimators import EstimatorError, EstimatorSpec, Scheme, estimate
from .models import BlrModel, BnnModel, DatasetError, FriskModel, conjugate_toy, load_csv, make_synthetic
from .optimize import (
    LEARNING_RATES,
    FitError,
    OptimizerConfig,
    StopRule,
    bands,
    benchmark,
    fit,
    read_bundle,
    summarize,
    write_bundle,
)
from .varfamily import VariationalParams

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _scheme(text: str) -> Scheme:
    try:
        return Scheme(text)
    except ValueError:
        choices = ", ".join(s.value for s in Scheme)
        raise argparse.ArgumentTypeError(f"unknown scheme {text!r} (choose from {choices})") from None


def _scheme_list(text: str) -> list[Scheme]:
    return [_scheme(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=("conjugate", "blr", "frisk", "bnn"), default="conjugate")
    g.add_argument("--csv", type=Path, help="data file; synthetic data when absent")
    g.add_argument("--target", help="response column of --csv")
    g.add_argument("--no-zscore", action="store_true", help="keep raw feature scales")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--n-obs", type=_positive_int, help="synthetic observations (blr, bnn)")
    g.add_argument("--p", type=_positive_int, help="synthetic features (blr, bnn)")
    g.add_argument("--n-eth", type=_positive_int, help="synthetic ethnicity groups (frisk)")
    g.add_argument("--n-prec", type=_positive_int, help="synthetic precincts (frisk)")
    g.add_argument("--width", type=_positive_int, default=30, help="hidden units (bnn)")


def _add_estimator_args(p: argparse.ArgumentParser, single: bool = True) -> None:
    g = p.add_argument_group("estimator")
    if single:
        g.add_argument("--scheme", type=_scheme, default=Scheme.OQ)
    g.add_argument("--n", type=_positive_int, default=20, help="points per estimate")
    g.add_argument("--m", type=_positive_int, help="coarse grid size for OQ_RICH")
    g.add_argument("--gamma", type=float, default=2.0, help="grid ratio n/m for OQ_RICH")
    g.add_argument("--grad-kind", choices=("reparam", "score"), default="reparam")
    g.add_argument("--entropy", choices=("stochastic", "analytic"), default="stochastic")
    g.add_argument("--backend", choices=("numpy", "tape"), default="numpy")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--grid-seed", type=int, default=0, help="seed of cached CLVQ grids")
    g.add_argument("--grid-cache", type=Path, help="overrides $QVI_GRID_CACHE")


def _add_init_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("variational parameters")
    g.add_argument("--params", type=Path, help="JSON [[loc...], [raw_scale...]]")
    g.add_argument("--init-loc", type=float, default=0.0)
    g.add_argument("--init-raw-scale", type=float, default=-1.0)


def _add_optimizer_args(p: argparse.ArgumentParser, sweep: bool = False) -> None:
    g = p.add_argument_group("optimizer")
    g.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    if sweep:
        g.add_argument("--alphas", type=_float_list, default=list(LEARNING_RATES))
    else:
        g.add_argument("--alpha", type=float, default=1e-2)
    g.add_argument("--max-steps", type=_nonneg_int, default=1000)
    g.add_argument("--stop-tol", type=float, default=1e-6)
    g.add_argument("--stop-window", type=_positive_int, default=20)
    g.add_argument("--budget-ms", type=float, help="wall-clock budget per run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qvi", description="Quantized variational inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="build a standard-normal quantizer grid")
    q.add_argument("--dim", type=_positive_int, required=True)
    q.add_argument("--n", type=_positive_int, required=True)
    q.add_argument("--out", type=Path, required=True)
    q.add_argument("--companion", type=_positive_int, help="CLVQ companion sample size")
    q.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("elbo", help="evaluate one ELBO/gradient estimate")
    _add_model_args(e)
    _add_estimator_args(e)
    _add_init_args(e)
    e.add_argument("--step", type=_nonneg_int, default=0, help="draw index for stochastic schemes")
    e.add_argument("--timing", action="store_true", help="include wall_ms in the report")

    f = sub.add_parser("fit", help="optimize the ELBO and write a trace")
    _add_model_args(f)
    _add_estimator_args(f)
    _add_init_args(f)
    _add_optimizer_args(f)
    f.add_argument("--out", type=Path, required=True, help="output directory")

    b = sub.add_parser("benchmark", help="repeated fits across schemes and learning rates")
    _add_model_args(b)
    b.add_argument("--schemes", type=_scheme_list, default=[Scheme.MC, Scheme.OQ])
    _add_estimator_args(b, single=False)
    _add_init_args(b)
    _add_optimizer_args(b, sweep=True)
    b.add_argument("--repeats", type=_positive_int, default=20)
    b.add_argument("--workers", type=_positive_int, default=1)
    b.add_argument("--ref-samples", type=_positive_int, default=100_000)
    b.add_argument("--out", type=Path, required=True, help="bundle directory")

    pd = sub.add_parser("plotdata", help="tidy and band CSVs from a bundle")
    pd.add_argument("--bundle", type=Path, required=True)
    pd.add_argument("--out", type=Path, help="defaults to BUNDLE/plotdata")
    pd.add_argument("--points", type=_positive_int, default=200, help="band grid size")

    for p in (q, e, f, b, pd):
        p.add_argument("--config", type=Path, help="key = value file; flags override")
    return parser


def read_config(path: Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def _config_argv(cfg: dict[str, str], sub: argparse.ArgumentParser) -> list[str]:
    known = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                known[opt[2:]] = action
    argv = []
    for key, value in cfg.items():
        action = known.get(key)
        if action is None or key == "config":
            raise UsageError(f"unknown config key {key!r}")
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
        else:
            argv.extend([f"--{key}", value])
    return argv


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    # config values first, command-line flags after so they win
    return parser.parse_args([args.command, *_config_argv(read_config(args.config), sub), *argv[1:]])


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def build_model(args):
    if args.model == "conjugate":
        return conjugate_toy()
    kind = "count" if args.model == "frisk" else "real"
    if args.csv is not None:
        if not args.target:
            raise UsageError("--csv needs --target")
        data = load_csv(args.csv, args.target, kind=kind, zscore=not args.no_zscore and args.model != "frisk")
    else:
        dims = {}
        if args.model in ("blr", "bnn"):
            if args.n_obs:
                dims["n"] = args.n_obs
            if args.p:
                dims["p"] = args.p
            if args.model == "bnn":
                dims["width"] = args.width
        else:
            if args.n_eth:
                dims["E"] = args.n_eth
            if args.n_prec:
                dims["P"] = args.n_prec
        data = make_synthetic(args.model, seed=args.data_seed, **dims)
    if args.model == "blr":
        return BlrModel(data)
    if args.model == "frisk":
        return FriskModel.from_dataset(data)
    return BnnModel(data, width=args.width)


def build_spec(args, scheme: Scheme | None = None) -> EstimatorSpec:
    try:
        return EstimatorSpec(
            scheme=scheme or args.scheme, n=args.n, m=args.m, gamma=args.gamma, grad_kind=args.grad_kind,
            entropy_mode=args.entropy, seed=args.seed, backend=args.backend,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_init(args, dim: int) -> VariationalParams:
    if args.params is not None:
        try:
            params = VariationalParams.from_json(json.loads(Path(args.params).read_text(encoding="utf-8")))
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read parameters from {args.params}: {exc}") from None
        if params.dim != dim:
            raise UsageError(f"{args.params} has dimension {params.dim}, model needs {dim}")
        return params
    return VariationalParams.init(dim, args.init_loc, args.init_raw_scale)


def grids_for(args, dim: int):
    cache = args.grid_cache

    def provide(spec: EstimatorSpec):
        if spec.scheme is Scheme.OQ:
            return [qgrid.cached_grid(dim, spec.n, seed=args.grid_seed, cache=cache)]
        if spec.scheme is Scheme.OQ_RICH:
            return [qgrid.cached_grid(dim, spec.n, seed=args.grid_seed, cache=cache),
                    qgrid.cached_grid(dim, spec.m_coarse, seed=args.grid_seed, cache=cache)]
        return None
    return provide


def _print_json(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _finite_or_none(x):
    return x if isinstance(x, float) and math.isfinite(x) else None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_quantize(args) -> int:
    grid = qgrid.build_grid(args.dim, args.n, seed=args.seed, companion=args.companion)
    path = qgrid.save_grid(grid, args.out)
    stat = qgrid.stationarity_residual(grid, seed=args.seed)
    _print_json({"path": str(path), "dim": grid.dim, "n": grid.n, "distortion": grid.distortion,
                 "stationarity_residual": stat.residual, "empty_cells": stat.empty_cells})
    return EXIT_OK


def cmd_elbo(args) -> int:
    model = build_model(args)
    spec = build_spec(args)
    params = build_init(args, model.dim)
    grids = grids_for(args, model.dim)(spec)
    try:
        rep = estimate(model, params, spec, grids, step=args.step)
    except EstimatorError as exc:
        _print_json({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_RUNTIME
    out = rep.to_dict(timing=args.timing)
    out["grad"] = rep.grad.tolist()
    _print_json(out)
    return EXIT_OK


def cmd_fit(args) -> int:
    model = build_model(args)
    spec = build_spec(args)
    init = build_init(args, model.dim)
    grids = grids_for(args, model.dim)(spec)
    try:
        opt = OptimizerConfig(kind=args.optimizer, alpha=args.alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    stop = StopRule(args.stop_tol, args.stop_window)
    args.out.mkdir(parents=True, exist_ok=True)
    trace_path = args.out / "trace.jsonl"
    header = {"model": args.model, "dim": model.dim, "scheme": spec.scheme.value, "n": spec.n,
              "seed": spec.seed, "alpha": opt.alpha, "optimizer": opt.kind, "max_steps": args.max_steps}
    with open(trace_path, "w", encoding="utf-8") as fh:
        def sink(line):
            fh.write(json.dumps(line) + "\n")
            fh.flush()
        try:
            params, trace = fit(model, init, spec, opt, args.max_steps, stop, grids,
                                time_budget_ms=args.budget_ms, sink=sink, header=header)
        except FitError as exc:
            (args.out / "params.json").write_text(json.dumps(exc.params.to_json()) + "\n", encoding="utf-8")
            _print_json({"error": "FitError", "message": str(exc), "trace": str(trace_path),
                         "steps": len(exc.trace.records)})
            return EXIT_RUNTIME
    (args.out / "params.json").write_text(json.dumps(params.to_json()) + "\n", encoding="utf-8")
    last = trace.records[-1] if trace.records else None
    _print_json({"status": trace.status, "steps": len(trace.records), "trace": str(trace_path),
                 "params": str(args.out / "params.json"), "loc": params.loc.tolist(),
                 "scale": params.scale.tolist(), "final_elbo": last.elbo if last else None})
    return EXIT_OK


def cmd_benchmark(args) -> int:
    model = build_model(args)
    init = build_init(args, model.dim)
    specs = [build_spec(args, s) for s in args.schemes]
    if not specs or not args.alphas or any(not a > 0 for a in args.alphas):
        raise UsageError("benchmark needs at least one scheme and positive learning rates")
    stop = StopRule(args.stop_tol, args.stop_window)
    bundle = benchmark(model, specs, repeats=args.repeats, alphas=args.alphas, max_steps=args.max_steps,
                       time_budget_ms=args.budget_ms, init=init, stop=stop,
                       grids_for=grids_for(args, model.dim), workers=args.workers)
    summary = summarize(bundle, model, ref_samples=args.ref_samples, ref_seed=args.seed)
    meta = {"model": args.model, "dim": model.dim, "schemes": [s.value for s in args.schemes],
            "alphas": list(args.alphas), "repeats": args.repeats, "max_steps": args.max_steps,
            "n": args.n, "seed": args.seed, "data_seed": args.data_seed}
    write_bundle(bundle, args.out, summary, meta)
    failed = [r.name for r in bundle.runs if r.error is not None]
    unverified = [r.name for r in bundle.runs if r.verified is False]
    _print_json({"bundle": str(args.out), "runs": len(bundle.runs), "failed": failed,
                 "unverified": unverified,
                 "summary": [{k: _finite_or_none(v) if isinstance(v, float) else v for k, v in row.items()}
                             for row in summary]})
    return EXIT_OK if bundle.ok() else EXIT_RUNTIME


def cmd_plotdata(args) -> int:
    bundle, _ = read_bundle(args.bundle)
    groups = bundle.groups()
    if not any(r.trace.records for rs in groups.values() for r in rs):
        raise ValueError(f"{args.bundle}: bundle has no recorded steps")
    out = args.out or args.bundle / "plotdata"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "raw.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "alpha", "run", "step", "wall_ms", "elbo", "gsq"])
        for row in bundle.rows():
            w.writerow([row["scheme"], row["alpha"], row["run"], row["step"], row["wall_ms"], row["elbo"], row["gsq"]])
    written = ["raw.csv"]
    for (scheme, alpha), runs in sorted(groups.items()):
        runs = [r for r in runs if r.trace.records]
        if not runs:
            continue
        eb = bands(runs, args.points, "elbo")
        gb = bands(runs, args.points, "gsq")
        name = f"band_{scheme}_a{alpha:g}.csv"
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            stats = ("min", "q10", "median", "q90", "max")
            w.writerow(["wall_ms", *(f"elbo_{s}" for s in stats), *(f"gsq_{s}" for s in stats)])
            for i, t in enumerate(eb["wall_ms"]):
                w.writerow([t, *(eb[s][i] for s in stats), *(gb[s][i] for s in stats)])
        written.append(name)
    _print_json({"out": str(out), "files": written})
    return EXIT_OK


COMMANDS = {"quantize": cmd_quantize, "elbo": cmd_elbo, "fit": cmd_fit,
            "benchmark": cmd_benchmark, "plotdata": cmd_plotdata}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"qvi: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"qvi: error: {exc}\n")
        return EXIT_USAGE
    except (qgrid.GridError, DatasetError, EstimatorError, FitError, ValueError, OSError, ArithmeticError) as exc:
        sys.stderr.write(f"qvi: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
