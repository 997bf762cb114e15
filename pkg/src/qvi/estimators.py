"""ELBO and gradient estimators.

All estimators share one form: a set of base points ``x_i`` with weights
``w_i`` is pushed through the variational map ``z_i = loc + scale * x_i``
and the integrand

    H(x, lambda) = log p(y, z) - log q_lambda(z)

is averaged, ``ELBO ~ sum_i w_i H(x_i)``.  The schemes differ only in the
points and weights:

=========  ==================================================  ============
scheme     points                                              weights
=========  ==================================================  ============
MC         i.i.d. N(0, I) draws, fresh every step              ``1/n``
QMC        Sobol points through the inverse CDF                ``1/n``
RQMC       randomly shifted Sobol points, fresh every step     ``1/n``
OQ         fixed optimal quantizer of N(0, I)                  cell masses
OQ_RICH    two quantizers combined by Richardson extrapolation
=========  ==================================================  ============

With ``entropy_mode="analytic"`` the ``- log q`` term is dropped from H and
the closed-form entropy is added once.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import difftape as dt
from .grid import QuantizerGrid
from .models import LogJointModel
from .sampling import sample_mc, sample_qmc, sample_rqmc
from .varfamily import LOG_2PI, VariationalParams, entropy, log_q, log_q_batch, reparam, reparam_batch

__all__ = [
    "BiasVariance",
    "EstimateReport",
    "EstimatorError",
    "EstimatorSpec",
    "RICHARDSON_WARN_CONDITION",
    "RichardsonInstabilityError",
    "RichardsonInstabilityWarning",
    "Scheme",
    "bias_variance_report",
    "estimate",
    "estimate_mc",
    "estimate_oq",
    "estimate_points",
    "estimate_richardson",
    "h_batch",
    "h_value",
    "h_value_and_grad",
    "reference_elbo",
    "richardson_weights",
    "score_gradient",
]

# condition numbers 1/(gamma^eps - 1) above this trigger a warning
RICHARDSON_WARN_CONDITION = 100.0
RICHARDSON_MIN_GAP = 1e-6


class Scheme(str, Enum):
    MC = "MC"
    QMC = "QMC"
    RQMC = "RQMC"
    OQ = "OQ"
    OQ_RICH = "OQ_RICH"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str):
            key = value.strip().upper().replace("-", "_")
            for member in cls:
                if member.value == key:
                    return member
        return None

    @property
    def stochastic(self) -> bool:
        return self in (Scheme.MC, Scheme.RQMC)

    @property
    def quantized(self) -> bool:
        return self in (Scheme.OQ, Scheme.OQ_RICH)


class EstimatorError(RuntimeError):
    pass


class RichardsonInstabilityError(EstimatorError):
    pass


class RichardsonInstabilityWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator to run and with how many points.

    ``m`` is the coarse grid size for ``OQ_RICH``; it defaults to
    ``round(n / gamma)``.
    """

    scheme: Scheme = Scheme.MC
    n: int = 20
    m: int | None = None
    gamma: float = 2.0
    grad_kind: str = "reparam"
    entropy_mode: str = "stochastic"
    seed: int = 0
    backend: str = "numpy"

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.grad_kind not in ("reparam", "score"):
            raise ValueError(f"grad_kind must be 'reparam' or 'score', got {self.grad_kind!r}")
        if self.entropy_mode not in ("stochastic", "analytic"):
            raise ValueError(f"entropy_mode must be 'stochastic' or 'analytic', got {self.entropy_mode!r}")
        if self.backend not in ("numpy", "tape"):
            raise ValueError(f"backend must be 'numpy' or 'tape', got {self.backend!r}")
        if self.scheme is Scheme.OQ_RICH:
            if self.m_coarse >= self.n or self.m_coarse < 1:
                raise ValueError(f"OQ_RICH needs 1 <= m < n, got n={self.n}, m={self.m_coarse}")

    @property
    def m_coarse(self) -> int:
        if self.m is not None:
            return self.m
        return max(1, int(round(self.n / self.gamma)))


@dataclass
class EstimateReport:
    elbo: float
    grad: np.ndarray
    scheme: Scheme
    n: int
    wall_ms: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def grad_sq_norm(self) -> float:
        return float(np.dot(self.grad, self.grad))

    def to_dict(self, timing: bool = True) -> dict:
        out = {"scheme": Scheme(self.scheme).value, "n": self.n, "elbo": self.elbo,
               "grad_sq_norm": self.grad_sq_norm}
        if timing:
            out["wall_ms"] = self.wall_ms
        out.update(self.extra)
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing))


# ---------------------------------------------------------------------------
# The integrand H
# ---------------------------------------------------------------------------

def _h_expr(model, loc, raw, x, entropy_mode):
    z = reparam(loc, raw, x)
    value = model.log_joint(z)
    if entropy_mode == "stochastic":
        value = value - log_q(loc, raw, z)
    return value


def h_value(model: LogJointModel, params: VariationalParams, x, entropy_mode: str = "stochastic") -> float:
    """``H(x, lambda)`` at one base point, evaluated through the tape."""
    return h_value_and_grad(model, params, x, entropy_mode)[0]


def h_value_and_grad(model, params, x, entropy_mode="stochastic") -> tuple[float, np.ndarray]:
    """``H`` and its reverse-mode gradient in ``lambda = (loc, raw_scale)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    d = params.dim
    if x.shape[0] != d or model.dim != d:
        raise ValueError(f"dimension mismatch: params {d}, point {x.shape[0]}, model {model.dim}")
    tape = dt.Tape()
    lam = tape.variables(2 * d)
    tape.output(_h_expr(model, lam[:d], lam[d:], x, entropy_mode))
    value = tape.forward(params.flat())
    return value, tape.backward()


def h_batch(model, params, X, entropy_mode="stochastic") -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``H`` and ``grad_lambda H`` over the rows of ``X``.

    With ``z = loc + s * x`` and ``s = exp(raw)``, ``log q(z)`` depends on
    lambda only through ``-sum(raw)``; hence ``dH/dloc = g`` and
    ``dH/draw = g * s * x + 1`` where ``g`` is the model's z-gradient.  In
    analytic mode ``H = log p(z)`` and the ``+ 1`` is left out.
    """
    X = np.asarray(X, dtype=float)
    Z = reparam_batch(params, X)
    lp, glp = model.log_joint_batch(Z)
    graw = glp * params.scale * X
    if entropy_mode == "stochastic":
        # (z - loc) / s is x itself, so log q needs no division
        lp = lp - np.sum(-0.5 * LOG_2PI - params.raw_scale - 0.5 * X * X, axis=1)
        graw = graw + 1.0
    return lp, np.concatenate([glp, graw], axis=1)


# ---------------------------------------------------------------------------
# Weighted evaluation
# ---------------------------------------------------------------------------

def _check_finite(values, what):
    if np.isfinite(values).all():
        return
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EstimatorError(f"non-finite {what} at point {int(bad[0])}: {values[bad[0]]!r}")


def _weighted(model, params, X, w, spec: EstimatorSpec) -> tuple[float, np.ndarray]:
    if X.shape[1] != model.dim or params.dim != model.dim:
        raise EstimatorError(f"dimension mismatch: points {X.shape[1]}, params {params.dim}, model {model.dim}")
    if spec.backend == "tape":
        H = np.empty(X.shape[0])
        G = np.empty((X.shape[0], 2 * params.dim))
        for i, x in enumerate(X):
            try:
                H[i], G[i] = h_value_and_grad(model, params, x, spec.entropy_mode)
            except (dt.TapeDomainError, OverflowError) as exc:
                raise EstimatorError(f"H failed at point {i}: {exc}") from exc
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            H, G = h_batch(model, params, X, spec.entropy_mode)
    _check_finite(H, "H")
    elbo = math.fsum(w * H)
    if spec.grad_kind == "score":
        grad = score_gradient(model, params, spec, reparam_batch(params, X), w)
    else:
        grad = w @ G
        if not np.isfinite(grad).all():
            _check_finite(G.sum(axis=1), "gradient")
    if spec.entropy_mode == "analytic":
        elbo += entropy(params)
        if spec.grad_kind == "reparam":
            grad = grad + _entropy_grad(params)
    return elbo, grad


def _entropy_grad(params):
    return np.concatenate([np.zeros(params.dim), np.ones(params.dim)])


def score_gradient(model, params, spec, points, weights) -> np.ndarray:
    """Score-function gradient ``sum_i w_i grad log q(z_i) * f(z_i)``.

    ``points`` are latent values held constant;
    ``f = log p(z) - log q(z)`` (stochastic entropy) or ``log p(z)`` plus the
    entropy gradient (analytic entropy).  ``f`` is not differentiated.
    """
    Z = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    lp, _ = model.log_joint_batch(Z)
    lq = log_q_batch(params, Z)
    f = lp - lq if spec.entropy_mode == "stochastic" else lp
    _check_finite(f, "score integrand")
    if spec.backend == "tape":
        d = params.dim
        grads = []
        for z in Z:
            tape = dt.Tape()
            lam = tape.variables(2 * d)
            tape.output(log_q(lam[:d], lam[d:], [float(v) for v in z]))
            tape.forward(params.flat())
            grads.append(tape.backward())
        S = np.array(grads)
    else:
        u = (Z - params.loc) / params.scale
        S = np.concatenate([u / params.scale, u * u - 1.0], axis=1)
    grad = np.sum((w * f)[:, None] * S, axis=0)
    if spec.entropy_mode == "analytic":
        grad = grad + _entropy_grad(params)
    return grad


# ---------------------------------------------------------------------------
# Schemes
# ---------------------------------------------------------------------------

def _step_seed(seed: int, step: int) -> list[int]:
    return [int(seed), int(step)]


def estimate_mc(model, params, spec: EstimatorSpec, step: int = 0) -> EstimateReport:
    """Uniform-weight estimator on MC, QMC or RQMC points.

    ``step`` selects a fresh, reproducible draw for the stochastic schemes
    (seeded by ``(spec.seed, step)``); QMC ignores it.
    """
    if spec.scheme.quantized:
        raise EstimatorError(f"estimate_mc does not handle scheme {spec.scheme.value}")
    t0 = time.perf_counter()
    d = model.dim
    if spec.scheme is Scheme.MC:
        batch = sample_mc(d, spec.n, _step_seed(spec.seed, step))
    elif spec.scheme is Scheme.QMC:
        batch = sample_qmc(d, spec.n)
    else:
        batch = sample_rqmc(d, spec.n, _step_seed(spec.seed, step))
    elbo, grad = _weighted(model, params, batch.points, batch.weights, spec)
    return EstimateReport(elbo, grad, spec.scheme, spec.n, (time.perf_counter() - t0) * 1e3)


def estimate_points(model, params, spec: EstimatorSpec, points, weights=None) -> EstimateReport:
    """Weighted estimate on caller-supplied base points (uniform weights by default)."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.full(X.shape[0], 1.0 / X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (X.shape[0],):
        raise EstimatorError(f"{X.shape[0]} points but {w.shape} weights")
    t0 = time.perf_counter()
    elbo, grad = _weighted(model, params, X, w, spec)
    return EstimateReport(elbo, grad, spec.scheme, X.shape[0], (time.perf_counter() - t0) * 1e3)


def estimate_oq(model, params, spec: EstimatorSpec, grid: QuantizerGrid) -> EstimateReport:
    """Quantized estimator ``sum_i w_i H(loc + scale * x_i)`` on a fixed grid."""
    if grid.dim != model.dim:
        raise EstimatorError(f"grid dimension {grid.dim} differs from latent dimension {model.dim}")
    t0 = time.perf_counter()
    elbo, grad = _weighted(model, params, grid.points, grid.weights, spec)
    return EstimateReport(elbo, grad, Scheme.OQ, grid.n, (time.perf_counter() - t0) * 1e3)


def richardson_weights(n: int, m: int, d: int) -> tuple[float, float, float]:
    """Weights ``(a, b)`` with ``L = a L_n + b L_m`` and the condition number.

    With ``gamma = n/m`` and ``eps = 2/d``, ``a = gamma^eps / (gamma^eps - 1)``
    and ``b = -1 / (gamma^eps - 1)``; for ``d = 1`` these are
    ``n^2/(n^2 - m^2)`` and ``-m^2/(n^2 - m^2)``.
    """
    if not n > m >= 1:
        raise RichardsonInstabilityError(f"Richardson needs n > m >= 1, got n={n}, m={m}")
    ge = (n / m) ** (2.0 / d)
    gap = ge - 1.0
    if abs(gap) <= RICHARDSON_MIN_GAP:
        raise RichardsonInstabilityError(
            f"gamma^eps - 1 = {gap:.3e} for n={n}, m={m}, d={d}: extrapolation is unstable"
        )
    cond = 1.0 / gap
    if cond > RICHARDSON_WARN_CONDITION:
        warnings.warn(
            f"Richardson condition number {cond:.1f} for d={d}: differences between the two "
            "grid estimates are amplified and the extrapolation may be unstable",
            RichardsonInstabilityWarning,
            stacklevel=3,
        )
    return ge / gap, -1.0 / gap, cond


def estimate_richardson(model, params, spec, grid_n: QuantizerGrid, grid_m: QuantizerGrid) -> EstimateReport:
    """Richardson-extrapolated quantized estimator from two grid levels."""
    t0 = time.perf_counter()
    a, b, cond = richardson_weights(grid_n.n, grid_m.n, model.dim)
    fine = estimate_oq(model, params, spec, grid_n)
    coarse = estimate_oq(model, params, spec, grid_m)
    elbo = a * fine.elbo + b * coarse.elbo
    grad = a * fine.grad + b * coarse.grad
    return EstimateReport(
        elbo, grad, Scheme.OQ_RICH, grid_n.n, (time.perf_counter() - t0) * 1e3,
        extra={"m": grid_m.n, "condition": cond},
    )


def estimate(model, params, spec: EstimatorSpec, grids: Sequence[QuantizerGrid] | None = None,
             step: int = 0) -> EstimateReport:
    """Dispatch on ``spec.scheme``; quantized schemes need ``grids``."""
    if spec.scheme is Scheme.OQ:
        if not grids:
            raise EstimatorError("OQ needs a grid")
        return estimate_oq(model, params, spec, grids[0])
    if spec.scheme is Scheme.OQ_RICH:
        if not grids or len(grids) < 2:
            raise EstimatorError("OQ_RICH needs two grids")
        return estimate_richardson(model, params, spec, grids[0], grids[1])
    return estimate_mc(model, params, spec, step=step)


# ---------------------------------------------------------------------------
# Bias-variance diagnostic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasVariance:
    trace_var: float
    sq_norm_of_mean: float
    mean_sq_norm: float
    residual: float


def bias_variance_report(model, params, spec, repeats: int, grids=None) -> BiasVariance:
    """Empirical ``E|g|^2 = tr V g + |E g|^2`` over ``repeats`` evaluations.

    Stochastic schemes draw fresh points for every repeat.  Moments use the
    ``1/repeats`` normalization, so the identity holds exactly up to
    rounding; it is checked at 1e-8 relative.
    """
    if repeats < 1 or (spec.scheme.stochastic and repeats < 2):
        raise ValueError(f"need repeats >= 2 for stochastic schemes, got {repeats}")
    G = np.array([estimate(model, params, spec, grids, step=r).grad for r in range(repeats)])
    dev = G - G[0]
    shift = dev.mean(axis=0)
    trace_var = float(np.sum(np.mean((dev - shift) ** 2, axis=0)))
    mean_g = G[0] + shift
    sq_norm_of_mean = float(mean_g @ mean_g)
    mean_sq_norm = float(np.mean(np.sum(G * G, axis=1)))
    residual = abs(mean_sq_norm - trace_var - sq_norm_of_mean) / max(mean_sq_norm, 1e-300)
    if residual > 1e-8:
        raise EstimatorError(f"bias-variance identity violated (relative residual {residual:.2e})")
    return BiasVariance(trace_var, sq_norm_of_mean, mean_sq_norm, residual)


def reference_elbo(model, params, n: int = 100_000, seed: int = 0, chunk: int = 10_000) -> tuple[float, float]:
    """Near-exact ELBO at ``params`` from ``n`` Monte Carlo draws.

    Averages ``log p(y, z)`` over the draws and adds the closed-form
    entropy, which has the same expectation as the stochastic form with
    less variance.  Returns ``(elbo, standard_error)``.
    """
    if n < 2:
        raise ValueError("reference_elbo needs n >= 2")
    rng = np.random.default_rng([int(seed), 0x5EF])
    total, total_sq, done = 0.0, 0.0, 0
    while done < n:
        k = min(chunk, n - done)
        Z = reparam_batch(params, rng.standard_normal((k, model.dim)))
        with np.errstate(over="ignore", invalid="ignore"):
            lp, _ = model.log_joint_batch(Z)
        _check_finite(lp, "log joint")
        total += math.fsum(lp)
        total_sq += math.fsum(lp * lp)
        done += k
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean + entropy(params), math.sqrt(var / n)
