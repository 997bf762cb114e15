"""Mean-field Gaussian variational family.

``q_lambda = N(loc, diag(exp(raw_scale))^2)``, with ``lambda = (loc,
raw_scale)`` flattened in that order into a vector of length ``K = 2d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import difftape as dt

__all__ = [
    "LOG_2PI",
    "VariationalParams",
    "entropy",
    "log_q",
    "log_q_batch",
    "reparam",
    "reparam_batch",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VariationalParams:
    loc: np.ndarray
    raw_scale: np.ndarray

    def __post_init__(self):
        loc = np.array(self.loc, dtype=float, ndmin=1)
        raw = np.array(self.raw_scale, dtype=float, ndmin=1)
        if loc.shape != raw.shape or loc.ndim != 1:
            raise ValueError(f"loc and raw_scale must be equal-length vectors, got {loc.shape}, {raw.shape}")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(raw))):
            raise ValueError("variational parameters must be finite")
        loc.setflags(write=False)
        raw.setflags(write=False)
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "raw_scale", raw)

    @classmethod
    def init(cls, d: int, loc: float = 0.0, raw_scale: float = -1.0) -> "VariationalParams":
        return cls(np.full(d, loc), np.full(d, raw_scale))

    @classmethod
    def from_flat(cls, flat) -> "VariationalParams":
        flat = np.asarray(flat, dtype=float)
        d = flat.shape[0] // 2
        if flat.shape != (2 * d,):
            raise ValueError(f"flat parameter vector must have even length, got {flat.shape}")
        return cls(flat[:d], flat[d:])

    @property
    def dim(self) -> int:
        return self.loc.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.dim

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.raw_scale)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.loc, self.raw_scale])

    def to_json(self) -> list[list[float]]:
        return [self.loc.tolist(), self.raw_scale.tolist()]

    @classmethod
    def from_json(cls, obj) -> "VariationalParams":
        loc, raw = obj
        return cls(np.asarray(loc, dtype=float), np.asarray(raw, dtype=float))


def reparam(loc, raw_scale, x):
    """``z = loc + exp(raw_scale) * x`` coordinatewise.

    Works on floats or on tape nodes for ``loc``/``raw_scale``, so that the
    derivatives with respect to the variational parameters flow.
    """
    if len(loc) != len(x) or len(raw_scale) != len(x):
        raise ValueError("reparam: dimensions of parameters and base point differ")
    return [m + dt.exp(r) * float(xi) for m, r, xi in zip(loc, raw_scale, x)]


def log_q(loc, raw_scale, z):
    """Log-density of the mean-field Gaussian at ``z`` (tape-compatible)."""
    if len(loc) != len(z) or len(raw_scale) != len(z):
        raise ValueError("log_q: dimensions of parameters and point differ")
    total = 0.0
    for m, r, zk in zip(loc, raw_scale, z):
        total = total + (-0.5 * LOG_2PI - r - dt.square(zk - m) / (2.0 * dt.exp(2.0 * r)))
    return total


def entropy(params: VariationalParams) -> float:
    return float(np.sum(params.raw_scale) + 0.5 * params.dim * (LOG_2PI + 1.0))


def reparam_batch(params: VariationalParams, X: np.ndarray) -> np.ndarray:
    """Row-wise :func:`reparam` for an ``(n, d)`` array of base points."""
    return params.loc + params.scale * np.asarray(X, dtype=float)


def log_q_batch(params: VariationalParams, Z: np.ndarray) -> np.ndarray:
    u = (np.asarray(Z, dtype=float) - params.loc) / params.scale
    return np.sum(-0.5 * LOG_2PI - params.raw_scale - 0.5 * u * u, axis=-1)
