"""Gradient-ascent driver over the variational parameters.

:func:`fit` alternates estimate -> optimizer step and records one trace
record per step.  Quantized schemes evaluate on a fixed standard-normal
grid; the shift/scale to the current ``q_lambda`` happens inside the
estimator, so no grid is rebuilt during optimization.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import difftape as dt
from .estimators import EstimatorError, EstimatorSpec, Scheme, estimate, reference_elbo
from .grid import GridError, QuantizerGrid, cached_grid
from .varfamily import VariationalParams

__all__ = [
    "AdamState",
    "BenchmarkRun",
    "FitError",
    "OptimizerConfig",
    "OptimizerError",
    "RunTrace",
    "StopRule",
    "TraceBundle",
    "TraceRecord",
    "adam_step",
    "bands",
    "benchmark",
    "converged_elbo",
    "default_grids",
    "fit",
    "read_bundle",
    "read_summary",
    "read_trace",
    "sgd_step",
    "summarize",
    "time_to_threshold",
    "write_bundle",
    "write_summary",
    "write_trace",
]

SNAPSHOT_EVERY = 10
LEARNING_RATES = (1e-3, 3e-3, 7e-3, 1e-2)


class OptimizerError(RuntimeError):
    pass


class FitError(RuntimeError):
    """Optimization aborted; carries the partial trace and last parameters."""

    def __init__(self, message: str, trace: "RunTrace", params: VariationalParams):
        super().__init__(message)
        self.trace = trace
        self.params = params


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, k: int, alpha: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(k), np.zeros(k), 0, alpha, beta1, beta2, eps)


def adam_step(state: AdamState, params: VariationalParams, grad) -> tuple[AdamState, VariationalParams]:
    """One bias-corrected Adam step in the ascent direction."""
    g = np.asarray(grad, dtype=float)
    if g.shape != state.m.shape:
        raise OptimizerError(f"gradient has shape {g.shape}, optimizer state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise OptimizerError("non-finite gradient")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    lam = params.flat() + state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), VariationalParams.from_flat(lam)


def sgd_step(params: VariationalParams, grad, lr: float) -> VariationalParams:
    g = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(g)):
        raise OptimizerError("non-finite gradient")
    return VariationalParams.from_flat(params.flat() + lr * g)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    alpha: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class StopRule:
    """Stop once ``max|lambda_k - lambda_{k-1}| < tol`` for ``window`` consecutive steps."""

    tol: float = 1e-6
    window: int = 20


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    step: int
    wall_ms: float
    elbo: float
    gsq: float


@dataclass
class RunTrace:
    header: dict = field(default_factory=dict)
    records: list[TraceRecord] = field(default_factory=list)
    snapshots: list[tuple[int, VariationalParams]] = field(default_factory=list)
    status: str = "running"

    def lines(self) -> Iterator[dict]:
        yield {"header": self.header}
        snaps = iter(self.snapshots)
        nxt = next(snaps, None)
        for rec in self.records:
            while nxt is not None and nxt[0] < rec.step:
                yield {"step": nxt[0], "lambda": nxt[1].to_json()}
                nxt = next(snaps, None)
            yield {"step": rec.step, "wall_ms": rec.wall_ms, "elbo": rec.elbo, "gsq": rec.gsq}
            while nxt is not None and nxt[0] == rec.step:
                yield {"step": nxt[0], "lambda": nxt[1].to_json()}
                nxt = next(snaps, None)
        while nxt is not None:
            yield {"step": nxt[0], "lambda": nxt[1].to_json()}
            nxt = next(snaps, None)
        yield {"status": self.status}

    def elbo(self) -> np.ndarray:
        return np.array([r.elbo for r in self.records])

    def wall_ms(self) -> np.ndarray:
        return np.array([r.wall_ms for r in self.records])

    def gsq(self) -> np.ndarray:
        return np.array([r.gsq for r in self.records])

    def same_path(self, other: "RunTrace") -> bool:
        """Equal steps, ELBOs, gradient norms and snapshots (wall-clock ignored)."""
        if [(r.step, r.elbo, r.gsq) for r in self.records] != [(r.step, r.elbo, r.gsq) for r in other.records]:
            return False
        if len(self.snapshots) != len(other.snapshots):
            return False
        return all(
            s == o and np.array_equal(p.flat(), q.flat())
            for (s, p), (o, q) in zip(self.snapshots, other.snapshots)
        )


def write_trace(trace: RunTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in trace.lines():
            fh.write(json.dumps(line) + "\n")
    return path


def read_trace(path) -> RunTrace:
    """Parse a JSON-lines trace written by :func:`write_trace` or a streaming sink."""
    trace = RunTrace(status="incomplete")
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if "header" in obj:
                trace.header = obj["header"]
            elif "lambda" in obj:
                trace.snapshots.append((int(obj["step"]), VariationalParams.from_json(obj["lambda"])))
            elif "status" in obj:
                trace.status = obj["status"]
            elif {"step", "wall_ms", "elbo", "gsq"} <= obj.keys():
                trace.records.append(TraceRecord(int(obj["step"]), float(obj["wall_ms"]),
                                                 float(obj["elbo"]), float(obj["gsq"])))
            else:
                raise ValueError(f"{path}: line {lineno}: unrecognized record {sorted(obj)}")
    steps = [r.step for r in trace.records]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"{path}: steps are not strictly increasing")
    return trace


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def default_grids(dim: int, spec: EstimatorSpec, seed: int = 0) -> list[QuantizerGrid] | None:
    """Cached standard-normal grids for the quantized schemes."""
    if spec.scheme is Scheme.OQ:
        return [cached_grid(dim, spec.n, seed=seed)]
    if spec.scheme is Scheme.OQ_RICH:
        return [cached_grid(dim, spec.n, seed=seed), cached_grid(dim, spec.m_coarse, seed=seed)]
    return None


def fit(
    model,
    init: VariationalParams,
    spec: EstimatorSpec,
    optimizer: OptimizerConfig = OptimizerConfig(),
    max_steps: int = 1000,
    stop: StopRule | None = StopRule(),
    grids: Sequence[QuantizerGrid] | None = None,
    snapshot_every: int = SNAPSHOT_EVERY,
    time_budget_ms: float | None = None,
    sink: Callable[[dict], None] | None = None,
    header: dict | None = None,
) -> tuple[VariationalParams, RunTrace]:
    """Maximize the estimated ELBO from ``init``.

    Step ``k`` (1-based) estimates the ELBO and gradient at ``lambda_{k-1}``,
    records them with the cumulative wall-clock, then updates.  The loop
    ends at ``max_steps``, when the stop rule fires, or when the optional
    time budget is spent.  ``sink`` receives each trace line as it is
    produced, so callers can stream traces to disk.

    Raises
    ------
    FitError
        When the estimator or the optimizer fails; the partial trace is
        attached and has status ``"error"``.
    """
    if init.dim != model.dim:
        raise ValueError(f"init has dimension {init.dim}, model {model.dim}")
    if spec.scheme.quantized and grids is None:
        grids = default_grids(model.dim, spec)
    trace = RunTrace(header=dict(header or {}))
    trace.header.setdefault("scheme", spec.scheme.value)
    trace.header.setdefault("n", spec.n)
    trace.header.setdefault("seed", spec.seed)
    trace.header.setdefault("alpha", optimizer.alpha)
    trace.header.setdefault("optimizer", optimizer.kind)
    emit = sink or (lambda line: None)
    emit({"header": trace.header})

    def snapshot(step, p):
        trace.snapshots.append((step, p))
        emit({"step": step, "lambda": p.to_json()})

    def finish(status):
        trace.status = status
        emit({"status": status})

    params = init
    state = AdamState.zeros(2 * model.dim, optimizer.alpha, optimizer.beta1, optimizer.beta2, optimizer.eps)
    calm = 0
    t0 = time.perf_counter()
    status = "max_steps"
    for step in range(1, max_steps + 1):
        try:
            rep = estimate(model, params, spec, grids, step=step)
            if optimizer.kind == "adam":
                state, new = adam_step(state, params, rep.grad)
            else:
                new = sgd_step(params, rep.grad, optimizer.alpha)
        except (EstimatorError, OptimizerError, dt.TapeDomainError, GridError) as exc:
            finish("error")
            raise FitError(f"step {step}: {exc}", trace, params) from exc
        wall = (time.perf_counter() - t0) * 1e3
        rec = TraceRecord(step, wall, float(rep.elbo), rep.grad_sq_norm)
        trace.records.append(rec)
        emit({"step": rec.step, "wall_ms": rec.wall_ms, "elbo": rec.elbo, "gsq": rec.gsq})
        delta = float(np.max(np.abs(new.flat() - params.flat())))
        params = new
        if snapshot_every and step % snapshot_every == 0:
            snapshot(step, params)
        if stop is not None:
            calm = calm + 1 if delta < stop.tol else 0
            if calm >= stop.window:
                status = "converged"
                break
        if time_budget_ms is not None and wall >= time_budget_ms:
            status = "budget"
            break
    if trace.records and (not trace.snapshots or trace.snapshots[-1][0] != trace.records[-1].step):
        snapshot(trace.records[-1].step, params)
    finish(status)
    return params, trace


def time_to_threshold(trace: RunTrace, rel: float = 0.01, converged: float | None = None,
                      tail: float = 0.1) -> float:
    """Wall-clock (ms) at which the ELBO first comes within ``rel`` of its converged value.

    The converged value defaults to the median ELBO over the final
    ``tail`` fraction of the records.  Returns ``inf`` for empty traces.
    """
    elbo = trace.elbo()
    if elbo.size == 0:
        return math.inf
    if converged is None:
        converged = converged_elbo(trace, tail)
    hit = np.flatnonzero(elbo >= converged - rel * abs(converged))
    return float(trace.records[hit[0]].wall_ms) if hit.size else math.inf


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkRun:
    scheme: str
    alpha: float
    run: int
    seed: int
    spec: EstimatorSpec
    trace: RunTrace | None = None
    params: VariationalParams | None = None
    verified: bool | None = None
    error: str | None = None

    @property
    def key(self) -> tuple[str, float]:
        return self.scheme, self.alpha

    @property
    def name(self) -> str:
        return f"{self.scheme}_a{self.alpha:g}_r{self.run:02d}"


@dataclass
class TraceBundle:
    runs: list[BenchmarkRun]

    def ok(self) -> list[BenchmarkRun]:
        return [r for r in self.runs if r.error is None]

    def groups(self) -> dict[tuple[str, float], list[BenchmarkRun]]:
        out: dict[tuple[str, float], list[BenchmarkRun]] = {}
        for r in self.ok():
            out.setdefault(r.key, []).append(r)
        return out

    def rows(self) -> list[dict]:
        """Tidy rows: one per recorded step of every successful run."""
        return [
            {"scheme": r.scheme, "alpha": r.alpha, "run": r.run, "step": rec.step,
             "wall_ms": rec.wall_ms, "elbo": rec.elbo, "gsq": rec.gsq}
            for r in self.ok() for rec in r.trace.records
        ]


def benchmark(
    model,
    specs: Iterable[EstimatorSpec],
    repeats: int = 20,
    alphas: Sequence[float] = (1e-2,),
    max_steps: int = 1000,
    time_budget_ms: float | None = None,
    init: VariationalParams | None = None,
    stop: StopRule | None = StopRule(),
    grids_for: Callable[[EstimatorSpec], Sequence[QuantizerGrid] | None] | None = None,
    workers: int = 1,
) -> TraceBundle:
    """Run every ``(spec, alpha)`` pair ``repeats`` times.

    MC/QMC/RQMC runs use seeds ``spec.seed + r``.  Quantized runs are
    deterministic, so they run once plus one verification rerun whose path
    must match (``BenchmarkRun.verified``).  With ``workers > 1`` runs are
    spread over threads, which perturbs wall-clock measurements.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    init = VariationalParams.init(model.dim) if init is None else init
    grids_for = grids_for or (lambda s: default_grids(model.dim, s))
    jobs: list[tuple[BenchmarkRun, Sequence[QuantizerGrid] | None]] = []
    for spec in specs:
        grids = grids_for(spec)
        for alpha in alphas:
            if spec.scheme.quantized:
                jobs.append((BenchmarkRun(spec.scheme.value, alpha, 0, spec.seed, spec), grids))
            else:
                for r in range(repeats):
                    jobs.append((BenchmarkRun(spec.scheme.value, alpha, r, spec.seed + r,
                                              replace(spec, seed=spec.seed + r)), grids))

    def run(item) -> BenchmarkRun:
        job, grids = item
        opt = OptimizerConfig(alpha=job.alpha)
        header = {"scheme": job.scheme, "alpha": job.alpha, "run": job.run, "seed": job.seed,
                  "n": job.spec.n, "model": getattr(model, "name", "model")}
        try:
            job.params, job.trace = fit(model, init, job.spec, opt, max_steps, stop, grids,
                                        time_budget_ms=time_budget_ms, header=header)
            if job.spec.scheme.quantized:
                _, again = fit(model, init, job.spec, opt, max_steps, stop, grids,
                               time_budget_ms=time_budget_ms, header=header)
                job.verified = job.trace.same_path(again)
        except FitError as exc:
            job.error = str(exc)
            job.trace, job.params = exc.trace, exc.params
        return job

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            done = list(pool.map(run, jobs))
    else:
        done = [run(j) for j in jobs]
    return TraceBundle(done)


def bands(runs: Sequence[BenchmarkRun], n_points: int = 200, field_name: str = "elbo") -> dict[str, np.ndarray]:
    """Median and quantile bands of a trace field on a common wall-clock grid.

    Each run is read as a step function of wall-clock (last value carried
    forward).  The grid spans from the latest first record to the latest
    final record, so every run has a value at every grid time.
    """
    traces = [r.trace for r in runs if r.trace is not None and r.trace.records]
    if not traces:
        raise ValueError("no traces to aggregate")
    start = max(t.records[0].wall_ms for t in traces)
    stop = max(t.records[-1].wall_ms for t in traces)
    grid = np.linspace(start, stop, n_points) if stop > start else np.array([start])
    values = np.empty((len(traces), grid.size))
    for k, t in enumerate(traces):
        wall = t.wall_ms()
        y = np.array([getattr(rec, field_name) for rec in t.records])
        idx = np.searchsorted(wall, grid, side="right") - 1
        values[k] = y[np.clip(idx, 0, len(y) - 1)]
    q = np.quantile(values, [0.0, 0.1, 0.5, 0.9, 1.0], axis=0)
    return {"wall_ms": grid, "min": q[0], "q10": q[1], "median": q[2], "q90": q[3], "max": q[4]}


# ---------------------------------------------------------------------------
# Bundles on disk
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("scheme", "alpha", "final_elbo", "final_gsq", "wall_to_threshold_ms", "relative_bias")
RUN_COLUMNS = ("scheme", "alpha", "run", "seed", "status", "steps", "final_elbo", "final_gsq",
               "wall_to_threshold_ms", "verified", "error")


def converged_elbo(trace: RunTrace, tail: float = 0.1) -> float:
    """Median ELBO over the final ``tail`` fraction of records."""
    elbo = trace.elbo()
    if elbo.size == 0:
        return math.nan
    k = max(1, int(math.ceil(tail * elbo.size)))
    return float(np.median(elbo[-k:]))


def _spec_dict(spec: EstimatorSpec) -> dict:
    return {"scheme": spec.scheme.value, "n": spec.n, "m": spec.m, "gamma": spec.gamma,
            "grad_kind": spec.grad_kind, "entropy_mode": spec.entropy_mode, "seed": spec.seed,
            "backend": spec.backend}


def summarize(bundle: TraceBundle, model, ref_samples: int = 100_000, ref_seed: int = 0) -> list[dict]:
    """One summary row per ``(scheme, alpha)``; medians over the group's runs.

    ``relative_bias = (ELBO_ref - ELBO_final) / |ELBO_ref|`` with
    ``ELBO_ref`` a ``ref_samples``-draw evaluation at the run's final
    parameters and ``ELBO_final`` the run's converged ELBO.
    """
    rows = []
    for (scheme, alpha), runs in bundle.groups().items():
        finals, gsqs, walls, rbs = [], [], [], []
        for r in runs:
            if not r.trace.records:
                continue
            final = converged_elbo(r.trace)
            ref, _ = reference_elbo(model, r.params, ref_samples, seed=ref_seed)
            finals.append(final)
            gsqs.append(r.trace.records[-1].gsq)
            walls.append(time_to_threshold(r.trace))
            rbs.append((ref - final) / abs(ref))
        if not finals:
            continue
        rows.append({"scheme": scheme, "alpha": alpha, "final_elbo": float(np.median(finals)),
                     "final_gsq": float(np.median(gsqs)), "wall_to_threshold_ms": float(np.median(walls)),
                     "relative_bias": float(np.median(rbs))})
    return rows


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})


def write_summary(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    _write_csv(path, SUMMARY_COLUMNS, rows)
    return path


def read_summary(path) -> list[dict]:
    """Parse a summary CSV back into typed rows."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise ValueError(f"{path}: expected columns {SUMMARY_COLUMNS}, got {reader.fieldnames}")
        return [{"scheme": row["scheme"], **{k: float(row[k]) for k in SUMMARY_COLUMNS[1:]}} for row in reader]


def write_bundle(bundle: TraceBundle, outdir, summary: Sequence[dict] | None = None,
                 meta: dict | None = None) -> Path:
    """Write ``manifest.json``, ``traces/*.jsonl``, ``runs.csv`` and ``summary.csv``."""
    outdir = Path(outdir)
    (outdir / "traces").mkdir(parents=True, exist_ok=True)
    entries, run_rows = [], []
    for r in bundle.runs:
        rel = f"traces/{r.name}.jsonl"
        if r.trace is not None:
            write_trace(r.trace, outdir / rel)
        has = r.trace is not None and bool(r.trace.records)
        entries.append({"name": r.name, "scheme": r.scheme, "alpha": r.alpha, "run": r.run, "seed": r.seed,
                        "spec": _spec_dict(r.spec), "status": r.trace.status if r.trace else "error",
                        "verified": r.verified, "error": r.error,
                        "trace": rel if r.trace is not None else None})
        run_rows.append({"scheme": r.scheme, "alpha": r.alpha, "run": r.run, "seed": r.seed,
                         "status": entries[-1]["status"], "steps": len(r.trace.records) if r.trace else 0,
                         "final_elbo": converged_elbo(r.trace) if has else None,
                         "final_gsq": r.trace.records[-1].gsq if has else None,
                         "wall_to_threshold_ms": time_to_threshold(r.trace) if has else None,
                         "verified": r.verified, "error": r.error})
    manifest = {"format": "qvi-bundle v1", "meta": dict(meta or {}), "runs": entries}
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    _write_csv(outdir / "runs.csv", RUN_COLUMNS, run_rows)
    if summary is not None:
        write_summary(summary, outdir / "summary.csv")
    return outdir


def read_bundle(outdir) -> tuple[TraceBundle, dict]:
    """Load a bundle written by :func:`write_bundle`; returns ``(bundle, manifest)``."""
    outdir = Path(outdir)
    try:
        with open(outdir / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ValueError(f"{outdir}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{outdir}/manifest.json: {exc}") from None
    if not isinstance(manifest, dict) or "runs" not in manifest:
        raise ValueError(f"{outdir}/manifest.json: missing 'runs'")
    runs = []
    for e in manifest["runs"]:
        spec = EstimatorSpec(**e["spec"])
        run = BenchmarkRun(e["scheme"], float(e["alpha"]), int(e["run"]), int(e["seed"]), spec,
                           verified=e.get("verified"), error=e.get("error"))
        if e.get("trace"):
            run.trace = read_trace(outdir / e["trace"])
            if run.trace.snapshots:
                run.params = run.trace.snapshots[-1][1]
        runs.append(run)
    return TraceBundle(runs), manifest
