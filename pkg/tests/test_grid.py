"""Quantizer grids: construction, diagnostics, transforms and file format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from qvi.grid import (
    BaseDistribution,
    GridError,
    GridFormatError,
    LloydConvergenceError,
    QuantizerGrid,
    assign_cells,
    build_1d_gaussian,
    build_clvq,
    cached_grid,
    cubature,
    distortion_of,
    load_grid,
    nearest_cell,
    save_grid,
    shift_scale,
    stationarity_residual,
)

SQRT_2_PI = math.sqrt(2.0 / math.pi)


def _grid_1d(points, weights=None):
    points = np.asarray(points, dtype=float)[:, None]
    weights = np.full(len(points), 1.0 / len(points)) if weights is None else np.asarray(weights)
    return QuantizerGrid(points, weights, 0.0, BaseDistribution(1))


def _quad_centroids(x):
    """Cell conditional means of N(0, 1) by numerical integration."""
    mids = (x[1:] + x[:-1]) / 2
    a = np.concatenate([[-np.inf], mids])
    b = np.concatenate([mids, [np.inf]])
    out = []
    for lo, hi in zip(a, b):
        mass = integrate.quad(stats.norm.pdf, lo, hi)[0]
        first = integrate.quad(lambda t: t * stats.norm.pdf(t), lo, hi)[0]
        out.append(first / mass)
    return np.array(out)


# ---------------------------------------------------------------------------
# nearest_cell
# ---------------------------------------------------------------------------

class TestNearestCell:

    def test_strictly_closer_point(self):
        assert nearest_cell(_grid_1d([-1.0, 1.0]), [0.5]) == 1

    def test_tie_goes_to_lowest_index(self):
        assert nearest_cell(_grid_1d([-1.0, 1.0]), [0.0]) == 0

    def test_single_cell(self):
        g = _grid_1d([0.0])
        assert all(nearest_cell(g, [x]) == 0 for x in (-5.0, 0.0, 3.2))

    def test_dimension_mismatch(self):
        with pytest.raises(GridError):
            nearest_cell(_grid_1d([0.0, 1.0]), [0.0, 0.0])

    def test_grid_points_project_to_themselves(self):
        g = build_clvq(3, 25, seed=2)
        assert [nearest_cell(g, p) for p in g.points] == list(range(g.n))

    def test_bulk_assignment_matches_scalar(self, rng):
        g = build_clvq(2, 16, seed=1)
        X = rng.standard_normal((500, 2))
        assert assign_cells(g.points, X).tolist() == [nearest_cell(g, x) for x in X]


# ---------------------------------------------------------------------------
# build_1d_gaussian
# ---------------------------------------------------------------------------

class TestBuild1dGaussian:

    def test_single_point(self):
        g = build_1d_gaussian(1)
        assert g.points.ravel().tolist() == [0.0]
        assert g.weights.tolist() == [1.0]
        assert g.distortion == pytest.approx(1.0, abs=1e-12)

    def test_two_points_closed_form(self):
        g = build_1d_gaussian(2)
        assert np.allclose(g.points.ravel(), [-SQRT_2_PI, SQRT_2_PI], atol=1e-9)
        assert np.allclose(g.weights, [0.5, 0.5], atol=1e-12)
        assert g.distortion == pytest.approx(1 - 2 / math.pi, abs=1e-12)

    @pytest.mark.parametrize("n", [3, 4, 7])
    def test_fixed_point_against_quadrature(self, n):
        """Every point is the conditional mean of its cell (independent quadrature)."""
        g = build_1d_gaussian(n)
        x = g.points.ravel()
        assert np.allclose(_quad_centroids(x), x, atol=1e-8)

    @pytest.mark.parametrize("n", [4, 9])
    def test_weights_are_cell_masses(self, n):
        x = build_1d_gaussian(n).points.ravel()
        mids = (x[1:] + x[:-1]) / 2
        expected = np.diff(stats.norm.cdf(np.concatenate([[-np.inf], mids, [np.inf]])))
        assert np.allclose(build_1d_gaussian(n).weights, expected, atol=1e-14)

    @pytest.mark.parametrize("n", [5, 16])
    def test_distortion_against_quadrature(self, n):
        g = build_1d_gaussian(n)
        x = g.points.ravel()
        val = integrate.quad(lambda t: np.min((t - x) ** 2) * stats.norm.pdf(t), -12, 12,
                             points=list((x[1:] + x[:-1]) / 2), limit=400)[0]
        assert g.distortion == pytest.approx(val, rel=1e-8)

    @pytest.mark.parametrize("n", [2, 8, 31])
    def test_symmetric(self, n):
        x = build_1d_gaussian(n).points.ravel()
        assert np.allclose(x, -x[::-1], atol=1e-9)

    def test_lloyd_monotone(self):
        seen = []
        build_1d_gaussian(12, callback=lambda it, d: seen.append(d))
        assert len(seen) > 5
        assert all(b <= a + 1e-15 for a, b in zip(seen, seen[1:]))

    def test_non_convergence_carries_residual(self):
        with pytest.raises(LloydConvergenceError) as info:
            build_1d_gaussian(10, tol=1e-14, max_iter=3)
        assert info.value.residual > 0

    def test_invalid_size(self):
        with pytest.raises(GridError):
            build_1d_gaussian(0)


# ---------------------------------------------------------------------------
# build_clvq
# ---------------------------------------------------------------------------

class TestBuildClvq:

    @pytest.mark.parametrize("seed", [0, 7])
    def test_matches_1d_closed_form(self, seed):
        g = build_clvq(1, 2, seed=seed)
        assert np.allclose(np.sort(g.points.ravel()), [-SQRT_2_PI, SQRT_2_PI], atol=0.02)

    def test_single_point_at_origin(self):
        g = build_clvq(2, 1, seed=3)
        assert np.all(np.abs(g.points) < 0.02)
        assert g.weights.tolist() == [1.0]

    def test_distortion_decreases_with_size(self):
        d100 = build_clvq(2, 100, seed=0).distortion
        d200 = build_clvq(2, 200, seed=0).distortion
        assert d200 < d100

    def test_deterministic(self):
        a, b = build_clvq(2, 10, seed=5), build_clvq(2, 10, seed=5)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.weights, b.weights)

    def test_seed_matters(self):
        assert not np.array_equal(build_clvq(2, 10, seed=1).points, build_clvq(2, 10, seed=2).points)

    def test_weights_normalized(self):
        g = build_clvq(4, 30, seed=0)
        assert abs(math.fsum(g.weights) - 1.0) <= 1e-12
        assert np.all(g.weights > 0)

    def test_companion_too_small(self):
        with pytest.raises(GridError):
            build_clvq(2, 10, companion=500)

    def test_stationary(self):
        g = build_clvq(2, 8, seed=0)
        assert stationarity_residual(g, probe=400_000).residual < 0.03


# ---------------------------------------------------------------------------
# distortion_of / stationarity_residual
# ---------------------------------------------------------------------------

class TestDiagnostics:

    def test_exact_one_point(self):
        assert distortion_of(_grid_1d([0.0])) == pytest.approx(1.0, abs=1e-9)

    def test_exact_two_points(self):
        assert distortion_of(build_1d_gaussian(2)) == pytest.approx(1 - 2 / math.pi, abs=1e-9)

    def test_exact_path_agrees_with_sampling(self):
        """The d=1 closed form against a 2-D grid whose second axis is a single level."""
        g1 = build_1d_gaussian(6)
        pts = np.column_stack([g1.points.ravel(), np.zeros(6)])
        g2 = QuantizerGrid(pts, g1.weights, 0.0, BaseDistribution(2))
        mc, se = distortion_of(g2, probe=400_000, return_stderr=True)
        # the zero second coordinate adds E[Y^2] = 1
        assert abs(mc - 1.0 - g1.distortion) < 4 * se

    def test_shifted_exact_distortion_scales(self):
        g = build_1d_gaussian(5)
        s = shift_scale(g, 3.0, 2.0)
        assert s.distortion == pytest.approx(4.0 * g.distortion, rel=1e-10)

    def test_probe_too_small(self):
        with pytest.raises(GridError):
            distortion_of(build_clvq(2, 4), probe=100)

    def test_stationarity_converged_grid(self):
        assert stationarity_residual(build_1d_gaussian(10)).residual < 0.01

    def test_stationarity_perturbed(self):
        g = build_1d_gaussian(10)
        pts = g.points.copy()
        pts[0, 0] += 0.5
        bad = QuantizerGrid(pts, g.weights, g.distortion, g.base)
        assert stationarity_residual(bad).residual >= 0.2

    def test_stationarity_single_cell(self):
        rep = stationarity_residual(_grid_1d([0.0]))
        assert rep.residual < 0.01
        assert rep.empty_cells == 0

    def test_far_point_counts_as_empty(self):
        g = _grid_1d([0.0, 40.0], [0.999, 0.001])
        rep = stationarity_residual(g, probe=20_000)
        assert rep.empty_cells == 1


# ---------------------------------------------------------------------------
# shift_scale / cubature
# ---------------------------------------------------------------------------

class TestShiftScale:

    def test_identity_is_bitwise(self):
        g = build_clvq(3, 12, seed=0)
        s = shift_scale(g, 0.0, 1.0)
        assert np.array_equal(s.points, g.points) and np.array_equal(s.weights, g.weights)

    def test_two_point_image(self):
        s = shift_scale(build_1d_gaussian(2), 3.0, 2.0)
        assert np.allclose(s.points.ravel(), [3 - 2 * SQRT_2_PI, 3 + 2 * SQRT_2_PI], atol=1e-9)
        assert np.allclose(s.weights, [0.5, 0.5])

    def test_nonpositive_sigma(self):
        with pytest.raises(GridError):
            shift_scale(build_1d_gaussian(2), 0.0, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(
        mu=st.lists(st.floats(-50, 50), min_size=2, max_size=2),
        sigma=st.lists(st.floats(1e-3, 30), min_size=2, max_size=2),
    )
    def test_affine_equivariance(self, mu, sigma):
        g = _shared_grid()
        s = shift_scale(g, mu, sigma)
        assert np.array_equal(s.points, np.asarray(mu) + np.asarray(sigma) * g.points)
        assert np.array_equal(s.weights, g.weights)


_CACHE = {}


def _shared_grid():
    if "g" not in _CACHE:
        _CACHE["g"] = build_clvq(2, 6, seed=0)
    return _CACHE["g"]


class TestCubature:

    def test_constant(self):
        g = build_1d_gaussian(9)
        assert cubature(g, lambda x: 2.5) == 2.5

    def test_linear_vanishes(self):
        assert abs(cubature(build_1d_gaussian(11), lambda x: x[0])) < 1e-10

    def test_square_two_points(self):
        assert cubature(build_1d_gaussian(2), lambda x: x[0] ** 2) == pytest.approx(2 / math.pi, abs=1e-9)

    def test_affine_bound(self):
        g = build_clvq(2, 12, seed=0)
        res = stationarity_residual(g).residual
        a, b = 3.0, -1.5
        val = cubature(g, lambda x: a * (x[0] + x[1]) + b)
        assert abs(val - b) <= g.n * res * abs(a) * 2

    def test_non_finite_names_point(self):
        with pytest.raises(GridError, match="grid point 0"):
            cubature(build_1d_gaussian(2), lambda x: float("nan") if x[0] < 0 else 1.0)

    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    @pytest.mark.parametrize("h, truth", [(lambda x: x * x, 1.0), (abs, SQRT_2_PI)])
    def test_convex_integrands_undershoot(self, n, h, truth):
        assert cubature(build_1d_gaussian(n), lambda x: h(x[0])) <= truth


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

class TestGridFiles:

    def test_round_trip_1d(self, tmp_path):
        g = build_1d_gaussian(13)
        h = load_grid(save_grid(g, tmp_path / "a.qvigrid"))
        assert np.array_equal(g.points, h.points) and np.array_equal(g.weights, h.weights)
        assert h.distortion == g.distortion

    def test_round_trip_clvq(self, tmp_path):
        g = build_clvq(3, 9, seed=1)
        h = load_grid(save_grid(g, tmp_path / "b.qvigrid"))
        assert np.array_equal(g.points, h.points) and np.array_equal(g.weights, h.weights)

    def _write(self, path, body):
        path.write_text(body, encoding="utf-8")
        return path

    def test_weights_not_normalized(self, tmp_path):
        p = self._write(tmp_path / "w.qvigrid", "qvigrid v1\ndim=1 n=2 base=stdnormal distortion=0.36\n-0.8 0.45\n0.8 0.45\n")
        with pytest.raises(GridFormatError, match="weights not normalized"):
            load_grid(p)

    def test_duplicate_points(self, tmp_path):
        p = self._write(tmp_path / "d.qvigrid", "qvigrid v1\ndim=1 n=2 base=stdnormal distortion=1.0\n0.0 0.5\n0.0 0.5\n")
        with pytest.raises(GridFormatError, match="duplicate"):
            load_grid(p)

    def test_version_mismatch(self, tmp_path):
        p = self._write(tmp_path / "v.qvigrid", "qvigrid v2\ndim=1 n=1 base=stdnormal distortion=1.0\n0.0 1.0\n")
        with pytest.raises(GridFormatError) as info:
            load_grid(p)
        assert info.value.line == 1

    def test_bad_row_names_line(self, tmp_path):
        p = self._write(tmp_path / "r.qvigrid", "qvigrid v1\ndim=1 n=2 base=stdnormal distortion=0.36\n-0.8 0.5\n0.8\n")
        with pytest.raises(GridFormatError) as info:
            load_grid(p)
        assert info.value.line == 4

    def test_missing_field(self, tmp_path):
        p = self._write(tmp_path / "m.qvigrid", "qvigrid v1\ndim=1 n=1 distortion=1.0\n0.0 1.0\n")
        with pytest.raises(GridFormatError) as info:
            load_grid(p)
        assert info.value.field == "base"

    def test_wrong_distortion(self, tmp_path):
        p = self._write(tmp_path / "x.qvigrid", "qvigrid v1\ndim=1 n=1 base=stdnormal distortion=0.5\n0.0 1.0\n")
        with pytest.raises(GridFormatError, match="distortion"):
            load_grid(p)

    def test_cache_builds_once(self, tmp_path):
        g = cached_grid(1, 6, cache=tmp_path)
        files = list(tmp_path.iterdir())
        assert len(files) == 1
        h = cached_grid(1, 6, cache=tmp_path)
        assert np.array_equal(g.points, h.points)

    def test_cache_env(self, grid_cache):
        cached_grid(1, 3)
        assert (grid_cache / "stdnormal_d1_n3.qvigrid").exists()
