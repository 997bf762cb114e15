"""Optimal (stationary) Voronoi quantizers of Gaussian base distributions.

A :class:`QuantizerGrid` is a discrete measure ``sum_i w_i delta_{x_i}``
approximating a normal distribution.  Grids of the standard normal are
built once (offline, cached on disk) and mapped to any diagonal Gaussian
with :func:`shift_scale`, which keeps weights and cell structure.

In one dimension everything is exact: Lloyd's fixed point is computed from
the closed-form cell centroids ``(phi(a) - phi(b)) / (Phi(b) - Phi(a))`` and
weights are the exact cell masses.  For ``d >= 2`` grids come from
competitive learning (CLVQ) followed by Lloyd passes on a companion sample,
and weights/distortion are seeded Monte Carlo estimates.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erfc

from .sampling import normal_inverse_cdf

__all__ = [
    "BaseDistribution",
    "GridError",
    "GridFormatError",
    "LloydConvergenceError",
    "QuantizerGrid",
    "Stationarity",
    "assign_cells",
    "build_1d_gaussian",
    "build_clvq",
    "build_grid",
    "cached_grid",
    "cubature",
    "distortion_of",
    "grid_cache_dir",
    "load_grid",
    "nearest_cell",
    "save_grid",
    "shift_scale",
    "stationarity_residual",
]

GRID_FORMAT = "qvigrid v1"
DEFAULT_PROBE = 200_000
DEFAULT_PROBE_SEED = 20240607
WEIGHT_TOL = 1e-12

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


class GridError(ValueError):
    """Invalid grid, failed construction, or dimension mismatch."""


class GridFormatError(GridError):
    """A grid file could not be parsed or failed validation."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.field = field


class LloydConvergenceError(GridError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class BaseDistribution:
    """The distribution a grid quantizes: ``loc + scale * N(0, I_dim)``.

    Only the normal family is supported.  Freshly built grids are standard
    (``loc``/``scale`` left as ``None``); :func:`shift_scale` records the
    affine map so that diagnostics probe the right distribution.
    """

    dim: int
    kind: str = "stdnormal"
    loc: tuple[float, ...] | None = None
    scale: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise GridError(f"base dimension must be >= 1, got {self.dim}")
        if self.kind != "stdnormal":
            raise GridError(f"unsupported base distribution {self.kind!r}")

    @property
    def is_standard(self) -> bool:
        return self.loc is None and self.scale is None

    def _loc(self) -> np.ndarray:
        return np.zeros(self.dim) if self.loc is None else np.asarray(self.loc)

    def _scale(self) -> np.ndarray:
        return np.ones(self.dim) if self.scale is None else np.asarray(self.scale)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        if self.is_standard:
            return z
        return self._loc() + self._scale() * z


@dataclass(frozen=True)
class QuantizerGrid:
    """``n`` points in R^d with probability weights.

    Arrays are stored read-only; a grid is immutable once built and can be
    shared between threads.
    """

    points: np.ndarray
    weights: np.ndarray
    distortion: float
    base: BaseDistribution
    history: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, ndmin=2)
        w = np.array(self.weights, dtype=float, ndmin=1)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "distortion", float(self.distortion))
        self.validate()

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def validate(self) -> None:
        """Check the structural invariants (not the distortion value)."""
        pts, w = self.points, self.weights
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise GridError("a grid needs at least one point")
        if pts.shape[1] != self.base.dim:
            raise GridError(f"points have dimension {pts.shape[1]}, base has {self.base.dim}")
        if w.shape != (pts.shape[0],):
            raise GridError(f"expected {pts.shape[0]} weights, got {w.shape[0]}")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise GridError("grid contains non-finite values")
        if np.any(w < 0):
            raise GridError("weights must be nonnegative")
        if abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
            raise GridError(f"weights not normalized (sum = {math.fsum(w)!r})")
        if not (self.distortion >= 0 and math.isfinite(self.distortion)):
            raise GridError(f"distortion must be a nonnegative real, got {self.distortion!r}")
        if len(np.unique(pts, axis=0)) != pts.shape[0]:
            raise GridError("grid has duplicate points")


# ---------------------------------------------------------------------------
# Voronoi projection
# ---------------------------------------------------------------------------

def nearest_cell(grid: QuantizerGrid, x) -> int:
    """Index of the Voronoi cell containing ``x``; ties go to the lowest index."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != grid.dim:
        raise GridError(f"point has dimension {x.shape[0]}, grid has {grid.dim}")
    d2 = np.sum((grid.points - x) ** 2, axis=1)
    return int(np.argmin(d2))


def assign_cells(points: np.ndarray, X: np.ndarray, chunk_rows: int = 16_384) -> np.ndarray:
    """Nearest grid point for every row of ``X``.

    Bulk version of :func:`nearest_cell` using ``|c|^2 - 2 x.c`` through a
    matrix product; it can differ from the exact rule only on numerically
    tied samples.
    """
    n, d = points.shape
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != d:
        raise GridError(f"samples must have shape (m, {d}), got {X.shape}")
    out = np.empty(X.shape[0], dtype=np.intp)
    c2 = np.einsum("ij,ij->i", points, points)
    for start in range(0, X.shape[0], chunk_rows):
        block = X[start:start + chunk_rows]
        out[start:start + chunk_rows] = np.argmin(c2 - 2.0 * block @ points.T, axis=1)
    return out


# ---------------------------------------------------------------------------
# One-dimensional exact path
# ---------------------------------------------------------------------------

def _phi(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.where(np.isfinite(x), np.exp(-0.5 * x * x) / _SQRT2PI, 0.0)


def _cell_mass(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # difference of survival functions in the upper tail avoids cancellation
    upper = 0.5 * (erfc(a / _SQRT2) - erfc(b / _SQRT2))
    lower = 0.5 * (erfc(-b / _SQRT2) - erfc(-a / _SQRT2))
    return np.where(a >= 0, upper, lower)


def _boundaries(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mid = 0.5 * (x[:-1] + x[1:])
    a = np.concatenate(([-np.inf], mid))
    b = np.concatenate((mid, [np.inf]))
    return a, b


def _cell_second_moment(a, b, x, mass):
    """``E[(Z - x)^2 ; a < Z < b]`` for Z standard normal."""
    pa, pb = _phi(a), _phi(b)
    with np.errstate(invalid="ignore"):
        apa = np.where(np.isfinite(a), a * pa, 0.0)
        bpb = np.where(np.isfinite(b), b * pb, 0.0)
    z2 = mass + apa - bpb
    z1 = pa - pb
    return z2 - 2.0 * x * z1 + x * x * mass


def _exact_distortion_1d(x: np.ndarray) -> float:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    a, b = _boundaries(xs)
    mass = _cell_mass(a, b)
    return float(math.fsum(_cell_second_moment(a, b, xs, mass)))


def build_1d_gaussian(
    n: int,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    callback: Callable[[int, float], None] | None = None,
) -> QuantizerGrid:
    """Stationary ``n``-point quantizer of N(0, 1) by Lloyd's fixed point.

    Each iteration sets the cell boundaries to midpoints of consecutive
    points and moves every point to the conditional mean of its cell.
    Iteration stops once the largest point movement drops below ``tol``.

    Parameters
    ----------
    n : int
        Grid size, ``n >= 1``.
    tol : float
        Convergence threshold on the max point movement.
    max_iter : int
        Iteration cap; exceeding it raises :class:`LloydConvergenceError`.
    callback : callable, optional
        Called as ``callback(iteration, distortion)`` before every update,
        mainly to observe the (non-increasing) distortion sequence.

    Returns
    -------
    QuantizerGrid
        Sorted points, exact cell masses as weights, exact distortion.
    """
    if n < 1:
        raise GridError(f"grid size must be >= 1, got {n}")
    x = normal_inverse_cdf((np.arange(n) + 0.5) / n) if n > 1 else np.zeros(1)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    history = []
    residual = math.inf
    for it in range(max_iter):
        a, b = _boundaries(x)
        mass = _cell_mass(a, b)
        dist = float(math.fsum(_cell_second_moment(a, b, x, mass)))
        history.append(dist)
        if callback is not None:
            callback(it, dist)
        new = (_phi(a) - _phi(b)) / mass
        residual = float(np.max(np.abs(new - x)))
        x = new
        if residual < tol:
            break
    else:
        raise LloydConvergenceError(
            f"Lloyd iteration for n={n} did not converge in {max_iter} steps", residual
        )
    a, b = _boundaries(x)
    w = _cell_mass(a, b)
    w = w / math.fsum(w)
    history.append(_exact_distortion_1d(x))
    return QuantizerGrid(
        points=x[:, None],
        weights=w,
        distortion=history[-1],
        base=BaseDistribution(1),
        history=tuple(history),
    )


# ---------------------------------------------------------------------------
# Competitive learning (d >= 2, or any d when requested)
# ---------------------------------------------------------------------------

def _lloyd_passes(centers, sample, max_passes, tol):
    n = centers.shape[0]
    labels = assign_cells(centers, sample)
    for _ in range(max_passes):
        counts = np.bincount(labels, minlength=n)
        sums = np.stack([np.bincount(labels, weights=col, minlength=n) for col in sample.T], axis=1)
        nonempty = counts > 0
        new = centers.copy()
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        moved = float(np.max(np.abs(new - centers)))
        centers = new
        labels = assign_cells(centers, sample)
        if moved < tol:
            break
    return centers, labels


def build_clvq(
    base: BaseDistribution | int,
    n: int,
    companion: int | None = None,
    schedule: tuple[float, float] | None = None,
    seed: int = 0,
    lloyd_passes: int = 200,
    lloyd_tol: float = 1e-7,
    weight_sample: int | None = None,
) -> QuantizerGrid:
    """Stationary grid of a normal base by competitive learning.

    One streaming pass of CLVQ over a seeded companion sample, with step
    ``gamma_k = a / (b + k)`` (default ``a = 1``, ``b = companion / 10``),
    is followed by full Lloyd passes on the same sample.  Weights are the
    empirical cell masses over a fresh sample of ``max(1e5, 1000 n)``
    points.  Cells left empty are re-seeded at the companion point farthest
    from its own centroid, at most three times.

    The result depends only on the arguments.
    """
    if isinstance(base, int):
        base = BaseDistribution(base)
    if n < 1:
        raise GridError(f"grid size must be >= 1, got {n}")
    companion = max(100 * n, 20_000) if companion is None else companion
    if companion < 100 * n:
        raise GridError(f"companion sample must hold >= 100*n = {100 * n} points, got {companion}")
    a, b = (1.0, companion / 10.0) if schedule is None else schedule
    weight_sample = max(100_000, 1000 * n) if weight_sample is None else weight_sample

    init_seq, comp_seq, weight_seq = np.random.SeedSequence(seed).spawn(3)
    sample = base.sample(companion, np.random.default_rng(comp_seq))
    pick = np.random.default_rng(init_seq).choice(companion, size=n, replace=False)
    centers = sample[pick].copy()

    for k, xi in enumerate(sample):
        i = int(np.argmin(np.sum((centers - xi) ** 2, axis=1)))
        centers[i] += (a / (b + k)) * (xi - centers[i])

    for attempt in range(4):
        centers, labels = _lloyd_passes(centers, sample, lloyd_passes, lloyd_tol)
        counts = np.bincount(labels, minlength=n)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        if attempt == 3:
            raise GridError(f"{empty.size} empty cell(s) remain after 3 re-seeding attempts")
        err = np.sum((sample - centers[labels]) ** 2, axis=1)
        for i in empty:
            j = int(np.argmax(err))
            centers[i] = sample[j]
            err[j] = -1.0

    probe = base.sample(weight_sample, np.random.default_rng(weight_seq))
    counts = np.bincount(assign_cells(centers, probe), minlength=n)
    weights = counts / counts.sum()
    grid = QuantizerGrid(centers, weights, 0.0, base)
    return QuantizerGrid(centers, weights, distortion_of(grid), base)


def build_grid(d: int, n: int, seed: int = 0, companion: int | None = None) -> QuantizerGrid:
    """Standard-normal grid: exact Lloyd for ``d == 1``, CLVQ otherwise."""
    if d == 1:
        return build_1d_gaussian(n)
    return build_clvq(BaseDistribution(d), n, companion=companion, seed=seed)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def distortion_of(
    grid: QuantizerGrid,
    probe: int = DEFAULT_PROBE,
    seed: int = DEFAULT_PROBE_SEED,
    return_stderr: bool = False,
):
    """Quadratic quantization error ``E min_i |X - x_i|^2``.

    One-dimensional grids use the exact cellwise integrals; otherwise this is
    a seeded Monte Carlo estimate over ``probe`` base draws.  With
    ``return_stderr`` a ``(value, standard_error)`` pair is returned, the
    error being 0 on the exact path.
    """
    if probe < 10_000:
        raise GridError(f"distortion probe needs >= 1e4 samples, got {probe}")
    base = grid.base
    if grid.dim == 1:
        loc, scale = float(base._loc()[0]), float(base._scale()[0])
        value = scale * scale * _exact_distortion_1d((grid.points[:, 0] - loc) / scale)
        return (value, 0.0) if return_stderr else value
    X = base.sample(probe, np.random.default_rng(seed))
    labels = assign_cells(grid.points, X)
    err = np.sum((X - grid.points[labels]) ** 2, axis=1)
    value = float(np.mean(err))
    if return_stderr:
        return value, float(np.std(err) / math.sqrt(probe))
    return value


class Stationarity(NamedTuple):
    residual: float
    empty_cells: int


def stationarity_residual(
    grid: QuantizerGrid, probe: int = 1_000_000, seed: int = DEFAULT_PROBE_SEED
) -> Stationarity:
    """Monte Carlo check of ``E[X | X_hat] = X_hat``.

    Returns the largest distance between a grid point and the mean of the
    probe samples in its cell.  Cells without hits contribute 0 and are
    counted in ``empty_cells``.
    """
    if probe < 10_000:
        raise GridError(f"stationarity probe needs >= 1e4 samples, got {probe}")
    X = grid.base.sample(probe, np.random.default_rng(seed))
    labels = assign_cells(grid.points, X)
    counts = np.bincount(labels, minlength=grid.n)
    sums = np.stack([np.bincount(labels, weights=col, minlength=grid.n) for col in X.T], axis=1)
    hit = counts > 0
    means = sums[hit] / counts[hit, None]
    dev = np.sqrt(np.sum((means - grid.points[hit]) ** 2, axis=1))
    residual = float(dev.max()) if dev.size else 0.0
    return Stationarity(residual, int((~hit).sum()))


def shift_scale(grid: QuantizerGrid, mu, sigma) -> QuantizerGrid:
    """Affine image ``mu + sigma * x_i`` of a grid; weights are unchanged.

    The image quantizes ``mu + sigma * X`` and its distortion is recomputed
    for that distribution.
    """
    d = grid.dim
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (d,))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (d,))
    if not np.all(sigma > 0):
        raise GridError("shift_scale needs a strictly positive sigma")
    points = mu + sigma * grid.points
    old = grid.base
    base = BaseDistribution(
        d,
        loc=tuple(float(v) for v in mu + sigma * old._loc()),
        scale=tuple(float(v) for v in sigma * old._scale()),
    )
    if np.all(mu == 0) and np.all(sigma == 1):
        base = old
    image = QuantizerGrid(points, grid.weights, 0.0, base)
    return QuantizerGrid(points, grid.weights, distortion_of(image), base)


def cubature(grid: QuantizerGrid, f: Callable[[np.ndarray], float]) -> float:
    """``sum_i w_i f(x_i)``, summed in index order with exact rounding."""
    terms = []
    for i, (x, w) in enumerate(zip(grid.points, grid.weights)):
        v = float(f(x))
        if not math.isfinite(v):
            raise GridError(f"integrand is not finite at grid point {i} ({x.tolist()}): {v!r}")
        terms.append(w * v)
    return math.fsum(terms)


# ---------------------------------------------------------------------------
# Files and cache
# ---------------------------------------------------------------------------

def save_grid(grid: QuantizerGrid, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not grid.base.is_standard:
        raise GridError("only standard-normal grids are written to disk")
    lines = [
        GRID_FORMAT,
        f"dim={grid.dim} n={grid.n} base={grid.base.kind} distortion={grid.distortion!r}",
    ]
    for x, w in zip(grid.points, grid.weights):
        lines.append(" ".join(repr(float(v)) for v in (*x, w)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_header(line: str) -> dict[str, str]:
    fields = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise GridFormatError(f"expected key=value, got {token!r}", line=2)
        fields[key] = value
    for key in ("dim", "n", "base", "distortion"):
        if key not in fields:
            raise GridFormatError("missing header field", line=2, field=key)
    return fields


def load_grid(path) -> QuantizerGrid:
    """Read and validate a ``qvigrid v1`` file."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise GridFormatError("empty file", line=1)
    if text[0].strip() != GRID_FORMAT:
        raise GridFormatError(f"unsupported version {text[0].strip()!r}, expected {GRID_FORMAT!r}", line=1)
    if len(text) < 2:
        raise GridFormatError("missing header", line=2)
    hdr = _parse_header(text[1])
    try:
        d, n = int(hdr["dim"]), int(hdr["n"])
    except ValueError as exc:
        raise GridFormatError(str(exc), line=2, field="dim/n") from None
    try:
        distortion = float(hdr["distortion"])
    except ValueError:
        raise GridFormatError(f"not a float: {hdr['distortion']!r}", line=2, field="distortion") from None
    if hdr["base"] != "stdnormal":
        raise GridFormatError(f"unsupported base {hdr['base']!r}", line=2, field="base")
    if d < 1 or n < 1:
        raise GridFormatError("dim and n must be >= 1", line=2, field="dim/n")
    rows = [ln for ln in text[2:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != n:
        raise GridFormatError(f"header says n={n} but found {len(rows)} point rows", line=3)
    data = np.empty((n, d + 1))
    for k, row in enumerate(rows):
        parts = row.split()
        if len(parts) != d + 1:
            raise GridFormatError(f"expected {d + 1} values, got {len(parts)}", line=k + 3)
        try:
            data[k] = [float(p) for p in parts]
        except ValueError as exc:
            raise GridFormatError(str(exc), line=k + 3) from None
    try:
        grid = QuantizerGrid(data[:, :d], data[:, d], distortion, BaseDistribution(d))
    except GridFormatError:
        raise
    except GridError as exc:
        raise GridFormatError(str(exc)) from None
    recomputed = distortion_of(grid)
    if abs(recomputed - distortion) > 1e-8 * max(abs(distortion), 1e-300):
        raise GridFormatError(
            f"stored distortion {distortion!r} disagrees with recomputed {recomputed!r}",
            line=2, field="distortion",
        )
    return grid


def grid_cache_dir() -> Path:
    return Path(os.environ.get("QVI_GRID_CACHE", "./grids"))


def cached_grid(d: int, n: int, seed: int = 0, cache: Path | str | None = None) -> QuantizerGrid:
    """Load the standard-normal grid ``(d, n, seed)`` from the cache, building it if absent."""
    cache = grid_cache_dir() if cache is None else Path(cache)
    path = cache / (f"stdnormal_d{d}_n{n}.qvigrid" if d == 1 else f"stdnormal_d{d}_n{n}_s{seed}.qvigrid")
    if path.exists():
        return load_grid(path)
    grid = build_grid(d, n, seed=seed)
    save_grid(grid, path)
    return grid
