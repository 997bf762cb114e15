"""Log-joint densities for the experiment model families, plus data.

Every model exposes two evaluation routes over the latent vector ``z``:

``log_joint(z)``
    Scalar code written against :mod:`qvi.difftape` primitives.  It runs on
    plain floats or on tape nodes, and is the reference route for gradients.
``log_joint_batch(Z)``
    Vectorized numpy evaluation over the rows of ``Z`` returning the values
    and the hand-derived gradients in ``z``.  Estimators use it by default.

The two routes are checked against each other (and against finite
differences) in the test-suite.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import gammaln

from . import difftape as dt

__all__ = [
    "BlrModel",
    "BnnModel",
    "Dataset",
    "DatasetError",
    "FriskModel",
    "FunctionModel",
    "LogJointModel",
    "conjugate_toy",
    "load_csv",
    "make_synthetic",
]

LOG_2PI = math.log(2.0 * math.pi)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Design matrix and targets.

    When features were z-scored, ``feature_mean`` and ``feature_sd`` hold
    the per-column statistics so that :meth:`raw_features` can undo it.
    """

    X: np.ndarray
    y: np.ndarray
    columns: tuple[str, ...]
    target: str = "y"
    target_kind: str = "real"
    feature_mean: np.ndarray | None = None
    feature_sd: np.ndarray | None = None
    truth: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=float, ndmin=2)
        if X.size == 0:
            X = X.reshape(np.shape(self.y)[0] if np.ndim(self.y) else 0, len(self.columns))
        y = np.array(self.y, dtype=float, ndmin=1)
        if X.shape[0] != y.shape[0]:
            raise DatasetError(f"{X.shape[0]} design rows but {y.shape[0]} targets")
        if X.shape[1] != len(self.columns):
            raise DatasetError(f"{X.shape[1]} feature columns but {len(self.columns)} names")
        if np.isnan(X).any() or np.isnan(y).any():
            raise DatasetError("dataset has missing values")
        if self.target_kind not in ("real", "count"):
            raise DatasetError(f"unknown target kind {self.target_kind!r}")
        if self.target_kind == "count" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise DatasetError("count targets must be nonnegative integers")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def raw_features(self) -> np.ndarray:
        if self.feature_mean is None:
            return self.X.copy()
        return self.X * self.feature_sd + self.feature_mean


def _zscore(X: np.ndarray):
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mean) / sd, mean, sd


class LogJointModel:
    """Interface: ``log p(y, z)`` and its gradient for a fixed dataset."""

    name = "model"
    dim: int

    def log_joint(self, z):
        raise NotImplementedError

    def log_joint_batch(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _check(self, Z):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[None, :]
        if Z.shape[1] != self.dim:
            raise ValueError(f"{self.name}: latent dimension is {self.dim}, got {Z.shape[1]}")
        return Z

    def _check_len(self, z):
        if len(z) != self.dim:
            raise ValueError(f"{self.name}: latent dimension is {self.dim}, got {len(z)}")


# ---------------------------------------------------------------------------
# Bayesian linear regression
# ---------------------------------------------------------------------------

class BlrModel(LogJointModel):
    """``b_k ~ N(prior_mean, prior_sd^2)``, ``y_i ~ N(x_i' b, noise_sd^2)``.

    The design gets a leading column of ones, so ``z = (intercept, coefs)``
    and ``dim = p + 1``.
    """

    name = "blr"

    def __init__(self, data: Dataset, prior_mean: float = 0.0, prior_sd: float = 10.0, noise_sd: float = 1.0):
        if prior_sd <= 0 or noise_sd <= 0:
            raise ValueError("prior_sd and noise_sd must be positive")
        self.data = data
        self.prior_mean = float(prior_mean)
        self.prior_sd = float(prior_sd)
        self.noise_sd = float(noise_sd)
        self.design = np.hstack([np.ones((data.n, 1)), data.X])
        self.dim = data.p + 1

    def log_joint(self, z):
        self._check_len(z)
        m, s, eps = self.prior_mean, self.prior_sd, self.noise_sd
        total = 0.0
        for zk in z:
            total = total + (-0.5 * LOG_2PI - math.log(s) - dt.square(zk - m) / (2.0 * s * s))
        for row, yi in zip(self.design, self.data.y):
            pred = 0.0
            for xij, bj in zip(row, z):
                pred = pred + bj * float(xij)
            total = total + (-0.5 * LOG_2PI - math.log(eps) - dt.square(float(yi) - pred) / (2.0 * eps * eps))
        return total

    def log_joint_batch(self, Z):
        Z = self._check(Z)
        m, s, eps = self.prior_mean, self.prior_sd, self.noise_sd
        dz = Z - m
        prior = np.sum(-0.5 * LOG_2PI - math.log(s) - dz * dz / (2 * s * s), axis=1)
        resid = self.data.y[None, :] - Z @ self.design.T
        n = self.data.n
        lik = -n * (0.5 * LOG_2PI + math.log(eps)) - np.sum(resid * resid, axis=1) / (2 * eps * eps)
        grad = resid @ self.design / (eps * eps) - dz / (s * s)
        return prior + lik, grad

    def exact_posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """Conjugate posterior mean and covariance of ``b``."""
        A = self.design.T @ self.design / self.noise_sd ** 2 + np.eye(self.dim) / self.prior_sd ** 2
        cov = np.linalg.inv(A)
        rhs = self.design.T @ self.data.y / self.noise_sd ** 2 + self.prior_mean / self.prior_sd ** 2
        return cov @ rhs, cov

    def log_evidence(self) -> float:
        """``log p(y)``: y is Gaussian with mean ``X m`` and covariance ``eps^2 I + s^2 X X'``."""
        X = self.design
        cov = self.noise_sd ** 2 * np.eye(self.data.n) + self.prior_sd ** 2 * X @ X.T
        r = self.data.y - X @ np.full(self.dim, self.prior_mean)
        _, logdet = np.linalg.slogdet(cov)
        return float(-0.5 * (self.data.n * LOG_2PI + logdet + r @ np.linalg.solve(cov, r)))


def conjugate_toy() -> BlrModel:
    """One latent, prior N(0, 1), one datum y = 0 with unit noise.

    The posterior is N(0, 1/2) and ``log p(y) = -log(4 pi) / 2``.
    """
    data = Dataset(np.zeros((1, 0)), np.zeros(1), columns=())
    return BlrModel(data, prior_mean=0.0, prior_sd=1.0, noise_sd=1.0)


# ---------------------------------------------------------------------------
# Hierarchical Poisson regression (stop-and-frisk shaped)
# ---------------------------------------------------------------------------

class FriskModel(LogJointModel):
    """Poisson GLM with ethnicity and precinct random effects.

    Latent layout: ``(mu, log sigma_a^2, log sigma_b^2, alpha_1..E,
    beta_1..P)``.  Each observed cell ``(e, p)`` contributes
    ``Y log lam - lam - log Y!`` with
    ``log lam = mu + alpha_e + beta_p + log N_ep``.
    """

    name = "frisk"
    hyper_sd = 10.0

    def __init__(self, ethnicity, precinct, exposure, counts, n_eth: int | None = None, n_prec: int | None = None):
        self.eth = np.asarray(ethnicity, dtype=np.intp)
        self.prec = np.asarray(precinct, dtype=np.intp)
        self.exposure = np.asarray(exposure, dtype=float)
        self.counts = np.asarray(counts, dtype=float)
        if np.any(self.exposure < 1):
            raise DatasetError("exposures must be >= 1")
        if np.any(self.counts < 0) or np.any(self.counts != np.round(self.counts)):
            raise DatasetError("counts must be nonnegative integers")
        self.n_eth = int(self.eth.max()) + 1 if n_eth is None else n_eth
        self.n_prec = int(self.prec.max()) + 1 if n_prec is None else n_prec
        self.log_exposure = np.log(self.exposure)
        self.log_fact = gammaln(self.counts + 1.0)
        self.dim = 3 + self.n_eth + self.n_prec
        self._eth_onehot = np.eye(self.n_eth)[self.eth]
        self._prec_onehot = np.eye(self.n_prec)[self.prec]

    @classmethod
    def from_dataset(cls, data: Dataset) -> "FriskModel":
        raw = data.raw_features()
        idx = {c: k for k, c in enumerate(data.columns)}
        try:
            eth = np.round(raw[:, idx["ethnicity"]]).astype(np.intp)
            prec = np.round(raw[:, idx["precinct"]]).astype(np.intp)
            expo = raw[:, idx["exposure"]]
        except KeyError as exc:
            raise DatasetError(f"frisk data needs column {exc.args[0]!r}") from None
        return cls(eth, prec, expo, data.y)

    def log_joint(self, z):
        self._check_len(z)
        E = self.n_eth
        mu, sa, sb = z[0], z[1], z[2]
        alpha, beta = z[3:3 + E], z[3 + E:]
        h = self.hyper_sd
        total = 0.0
        for v in (mu, sa, sb):
            total = total + (-0.5 * LOG_2PI - math.log(h) - dt.square(v) / (2 * h * h))
        inv_a, inv_b = dt.exp(-sa), dt.exp(-sb)
        for a in alpha:
            total = total + (-0.5 * LOG_2PI - 0.5 * sa - 0.5 * dt.square(a) * inv_a)
        for b in beta:
            total = total + (-0.5 * LOG_2PI - 0.5 * sb - 0.5 * dt.square(b) * inv_b)
        for e, p, lexp, y, lf in zip(self.eth, self.prec, self.log_exposure, self.counts, self.log_fact):
            eta = mu + alpha[e] + beta[p] + float(lexp)
            total = total + (float(y) * eta - dt.exp(eta) - float(lf))
        return total

    def log_joint_batch(self, Z):
        Z = self._check(Z)
        E, P = self.n_eth, self.n_prec
        mu, sa, sb = Z[:, 0], Z[:, 1], Z[:, 2]
        alpha, beta = Z[:, 3:3 + E], Z[:, 3 + E:]
        h2 = self.hyper_sd ** 2
        hyp = Z[:, :3]
        val = np.sum(-0.5 * LOG_2PI - math.log(self.hyper_sd) - hyp * hyp / (2 * h2), axis=1)
        grad = np.zeros_like(Z)
        grad[:, :3] = -hyp / h2

        inv_a, inv_b = np.exp(-sa), np.exp(-sb)
        ssa, ssb = np.sum(alpha * alpha, axis=1), np.sum(beta * beta, axis=1)
        val += E * (-0.5 * LOG_2PI) - 0.5 * E * sa - 0.5 * ssa * inv_a
        val += P * (-0.5 * LOG_2PI) - 0.5 * P * sb - 0.5 * ssb * inv_b
        grad[:, 1] += -0.5 * E + 0.5 * ssa * inv_a
        grad[:, 2] += -0.5 * P + 0.5 * ssb * inv_b
        grad[:, 3:3 + E] -= alpha * inv_a[:, None]
        grad[:, 3 + E:] -= beta * inv_b[:, None]

        eta = mu[:, None] + alpha[:, self.eth] + beta[:, self.prec] + self.log_exposure
        rate = np.exp(eta)
        val += np.sum(self.counts * eta - rate - self.log_fact, axis=1)
        r = self.counts - rate
        grad[:, 0] += r.sum(axis=1)
        grad[:, 3:3 + E] += r @ self._eth_onehot
        grad[:, 3 + E:] += r @ self._prec_onehot
        return val, grad


# ---------------------------------------------------------------------------
# Bayesian neural network
# ---------------------------------------------------------------------------

class BnnModel(LogJointModel):
    """One-hidden-layer ReLU regression network with Gamma hyperpriors.

    Latent layout: ``(log alpha, log tau, W1 (p x width, row-major), b1,
    W2, b2)``.  ``alpha`` and ``tau`` carry ``Gamma(shape, rate)`` priors
    and enter through log links, so the log-density of ``u = log alpha`` is
    ``shape log rate - lgamma(shape) + shape u - rate exp(u)``.  All weights
    and biases are ``N(0, 1/alpha)``; ``y ~ N(psi(w, x), 1/tau)``.
    """

    name = "bnn"

    def __init__(self, data: Dataset, width: int = 30, gamma_shape: float = 1.0, gamma_rate: float = 0.1):
        if width < 1:
            raise ValueError("width must be >= 1")
        self.data = data
        self.width = width
        self.gamma_shape = float(gamma_shape)
        self.gamma_rate = float(gamma_rate)
        p, W = data.p, width
        self.n_weights = p * W + W + W + 1
        self.dim = 2 + self.n_weights

    def unpack(self, w):
        p, W = self.data.p, self.width
        W1 = [w[j * W:(j + 1) * W] for j in range(p)]
        o = p * W
        return W1, w[o:o + W], w[o + W:o + 2 * W], w[o + 2 * W]

    def _log_gamma_prior(self, u):
        a, b = self.gamma_shape, self.gamma_rate
        return a * math.log(b) - math.lgamma(a) + a * u - b * dt.exp(u)

    def forward(self, w, x):
        """Network output ``psi(w, x)`` for one input row (tape-compatible)."""
        W1, b1, W2, b2 = self.unpack(w)
        out = b2
        for k in range(self.width):
            pre = b1[k]
            for j, xj in enumerate(x):
                pre = pre + W1[j][k] * float(xj)
            out = out + W2[k] * dt.relu(pre)
        return out

    def log_joint(self, z):
        self._check_len(z)
        ua, ut = z[0], z[1]
        w = z[2:]
        total = self._log_gamma_prior(ua) + self._log_gamma_prior(ut)
        alpha, tau = dt.exp(ua), dt.exp(ut)
        sq = 0.0
        for wk in w:
            sq = sq + dt.square(wk)
        total = total + self.n_weights * (0.5 * ua - 0.5 * LOG_2PI) - 0.5 * alpha * sq
        rss = 0.0
        for x, y in zip(self.data.X, self.data.y):
            rss = rss + dt.square(float(y) - self.forward(w, x))
        total = total + self.data.n * (0.5 * ut - 0.5 * LOG_2PI) - 0.5 * tau * rss
        return total

    def log_joint_batch(self, Z):
        Z = self._check(Z)
        a, b = self.gamma_shape, self.gamma_rate
        p, W, n = self.data.p, self.width, self.data.n
        ua, ut = Z[:, 0], Z[:, 1]
        w = Z[:, 2:]
        o = p * W
        W1 = w[:, :o].reshape(-1, p, W)
        b1 = w[:, o:o + W]
        W2 = w[:, o + W:o + 2 * W]
        b2 = w[:, o + 2 * W]
        alpha, tau = np.exp(ua), np.exp(ut)
        const = a * math.log(b) - math.lgamma(a)

        pre = np.einsum("nj,bjk->bnk", self.data.X, W1) + b1[:, None, :]
        act = np.maximum(pre, 0.0)
        psi = np.einsum("bnk,bk->bn", act, W2) + b2[:, None]
        r = self.data.y[None, :] - psi
        rss = np.sum(r * r, axis=1)
        sq = np.sum(w * w, axis=1)

        val = (2 * const + a * ua - b * alpha + a * ut - b * tau
               + self.n_weights * (0.5 * ua - 0.5 * LOG_2PI) - 0.5 * alpha * sq
               + n * (0.5 * ut - 0.5 * LOG_2PI) - 0.5 * tau * rss)

        grad = np.empty_like(Z)
        grad[:, 0] = a - b * alpha + 0.5 * self.n_weights - 0.5 * alpha * sq
        grad[:, 1] = a - b * tau + 0.5 * n - 0.5 * tau * rss
        dpsi = tau[:, None] * r
        dact = dpsi[:, :, None] * W2[:, None, :] * (pre > 0)
        gw = np.empty_like(w)
        gw[:, :o] = np.einsum("nj,bnk->bjk", self.data.X, dact).reshape(-1, o)
        gw[:, o:o + W] = dact.sum(axis=1)
        gw[:, o + W:o + 2 * W] = np.einsum("bnk,bn->bk", act, dpsi)
        gw[:, o + 2 * W] = dpsi.sum(axis=1)
        grad[:, 2:] = gw - alpha[:, None] * w
        return val, grad


# ---------------------------------------------------------------------------
# Plain integrands used as toy "models"
# ---------------------------------------------------------------------------

class FunctionModel(LogJointModel):
    """Wrap an arbitrary log-joint for toy experiments.

    ``fn(z)`` must accept a sequence (floats or tape nodes).  ``batch`` is
    an optional vectorized ``Z -> (values, grads)``; without it the batch
    route falls back to the tape.
    """

    name = "function"

    def __init__(self, fn: Callable, dim: int, batch: Callable | None = None, name: str = "function"):
        self.fn = fn
        self.dim = dim
        self.batch = batch
        self.name = name

    def log_joint(self, z):
        self._check_len(z)
        return self.fn(z)

    def log_joint_batch(self, Z):
        Z = self._check(Z)
        if self.batch is not None:
            return self.batch(Z)
        out = [dt.value_and_grad(self.fn, row) for row in Z]
        return np.array([v for v, _ in out]), np.array([g for _, g in out])


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def make_synthetic(kind: str, seed: int = 0, **dims) -> Dataset:
    """Seeded data from each model's own generative process.

    ``blr`` (n=500, p=8)
        z-scored N(0, 1) features; intercept 1, coefficients N(0, 1);
        unit-variance Gaussian noise.
    ``frisk`` (E=3, P=32)
        exposures ``1 + Poisson(50)``; ``mu = -1``, ``sigma_a = 0.3``,
        ``sigma_b = 0.6``; Poisson counts.  Columns are raw indices.
    ``bnn`` (n=200, p=1, width=30)
        inputs U(-3, 3), z-scored; network weights N(0, 1) (``alpha = 1``);
        noise precision ``tau = 25``.

    The ground truth is stored in ``Dataset.truth``.
    """
    rng = np.random.default_rng(seed)
    if kind == "blr":
        n, p = dims.get("n", 500), dims.get("p", 8)
        if n < 1 or p < 1:
            raise DatasetError("blr data needs n >= 1 and p >= 1")
        Xz, mean, sd = _zscore(rng.standard_normal((n, p)))
        b = np.concatenate([[1.0], rng.standard_normal(p)])
        y = b[0] + Xz @ b[1:] + rng.standard_normal(n)
        return Dataset(Xz, y, tuple(f"x{j}" for j in range(p)), "y", "real", mean, sd,
                       truth={"b": b.tolist(), "noise_sd": 1.0})
    if kind == "frisk":
        E, P = dims.get("E", 3), dims.get("P", 32)
        if E < 1 or P < 1:
            raise DatasetError("frisk data needs E >= 1 and P >= 1")
        mu, sig_a, sig_b = -1.0, 0.3, 0.6
        alpha = sig_a * rng.standard_normal(E)
        beta = sig_b * rng.standard_normal(P)
        eth, prec = np.divmod(np.arange(E * P), P)
        expo = 1.0 + rng.poisson(50.0, E * P)
        counts = rng.poisson(expo * np.exp(mu + alpha[eth] + beta[prec]))
        X = np.column_stack([eth, prec, expo]).astype(float)
        return Dataset(X, counts, ("ethnicity", "precinct", "exposure"), "stops", "count",
                       truth={"mu": mu, "sigma_alpha": sig_a, "sigma_beta": sig_b,
                              "alpha": alpha.tolist(), "beta": beta.tolist()})
    if kind == "bnn":
        n, p, width = dims.get("n", 200), dims.get("p", 1), dims.get("width", 30)
        if n < 1 or p < 1:
            raise DatasetError("bnn data needs n >= 1 and p >= 1")
        Xz, mean, sd = _zscore(rng.uniform(-3.0, 3.0, (n, p)))
        net = BnnModel(Dataset(Xz, np.zeros(n), tuple(f"x{j}" for j in range(p))), width=width)
        w = rng.standard_normal(net.n_weights)
        tau = 25.0
        z = np.concatenate([[0.0, math.log(tau)], w])
        W1 = w[:p * width].reshape(p, width)
        b1 = w[p * width:p * width + width]
        W2 = w[p * width + width:p * width + 2 * width]
        psi = np.maximum(Xz @ W1 + b1, 0.0) @ W2 + w[-1]
        y = psi + rng.standard_normal(n) / math.sqrt(tau)
        return Dataset(Xz, y, tuple(f"x{j}" for j in range(p)), "y", "real", mean, sd,
                       truth={"z": z.tolist(), "alpha": 1.0, "tau": tau})
    raise DatasetError(f"unknown synthetic kind {kind!r}")


def load_csv(path, target: str, kind: str = "real", zscore: bool = True) -> Dataset:
    """Comma-separated file with a header row; ``target`` names the response.

    Feature columns are z-scored (statistics kept on the dataset) unless
    ``zscore`` is false.  ``kind="count"`` validates the targets as counts.
    """
    if kind not in ("real", "count"):
        raise DatasetError(f"unknown target kind {kind!r}")
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if target not in header:
            raise DatasetError(f"{path}: target column {target!r} not in header {header}")
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DatasetError(f"{path}: line {reader.line_num}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    t = header.index(target)
    y = data[:, t]
    feats = [c for c in header if c != target]
    X = np.delete(data, t, axis=1)
    if kind == "count" and (np.any(y < 0) or np.any(y != np.round(y))):
        bad = y[(y < 0) | (y != np.round(y))][0]
        raise DatasetError(f"{path}: target {target!r} must hold counts, found {bad!r}")
    mean = sd = None
    if zscore and X.shape[0] > 0:
        X, mean, sd = _zscore(X)
    return Dataset(X, y, tuple(feats), target, kind, mean, sd)
