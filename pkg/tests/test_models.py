"""Log-joint densities and data plumbing, checked against scipy.stats."""

import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from qvi import difftape as dt
from qvi.models import (
    BlrModel,
    BnnModel,
    Dataset,
    DatasetError,
    FriskModel,
    FunctionModel,
    conjugate_toy,
    load_csv,
    make_synthetic,
)


def _small_models():
    blr = BlrModel(make_synthetic("blr", seed=1, n=15, p=3))
    frisk = FriskModel.from_dataset(make_synthetic("frisk", seed=2, E=2, P=4))
    bnn = BnnModel(make_synthetic("bnn", seed=3, n=12, p=2, width=4), width=4)
    return {"blr": blr, "frisk": frisk, "bnn": bnn, "conjugate": conjugate_toy()}


MODELS = _small_models()


def _tape_value_grad(model, z):
    return dt.value_and_grad(model.log_joint, z)


# ---------------------------------------------------------------------------
# Bayesian linear regression
# ---------------------------------------------------------------------------

class TestBlr:

    def test_empty_data_is_prior(self):
        data = Dataset(np.zeros((0, 2)), np.zeros(0), ("a", "b"))
        m = BlrModel(data, prior_mean=0.5, prior_sd=2.0)
        expected = 3 * (-0.5 * math.log(2 * math.pi) - math.log(2.0))
        assert m.log_joint([0.5] * 3) == pytest.approx(expected, abs=1e-12)
        assert m.log_joint_batch(np.full((1, 3), 0.5))[0][0] == pytest.approx(expected, abs=1e-12)

    def test_against_scipy(self, rng):
        m = MODELS["blr"]
        z = rng.standard_normal(m.dim)
        mean = m.design @ z
        expected = stats.norm.logpdf(z, 0, 10).sum() + stats.norm.logpdf(m.data.y, mean, 1).sum()
        assert m.log_joint(list(z)) == pytest.approx(expected, rel=1e-12)

    def test_exact_posterior_and_evidence(self):
        m = MODELS["blr"]
        X, y = m.design, m.data.y
        s2, e2 = m.prior_sd ** 2, m.noise_sd ** 2
        cov_y = e2 * np.eye(len(y)) + s2 * X @ X.T
        assert m.log_evidence() == pytest.approx(stats.multivariate_normal(np.zeros(len(y)), cov_y).logpdf(y), rel=1e-10)
        mean, cov = m.exact_posterior()
        # Gaussian conditioning as an independent route
        k = s2 * X.T @ np.linalg.inv(cov_y)
        assert np.allclose(mean, k @ y, atol=1e-9)
        assert np.allclose(cov, s2 * np.eye(m.dim) - k @ X * s2, atol=1e-9)

    def test_conjugate_toy_closed_form(self):
        m = conjugate_toy()
        mean, cov = m.exact_posterior()
        assert mean[0] == pytest.approx(0.0, abs=1e-15) and cov[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert m.log_evidence() == pytest.approx(-0.5 * math.log(4 * math.pi), abs=1e-14)

    def test_concave_along_segments(self, rng):
        m = MODELS["blr"]
        for _ in range(100):
            a, b = rng.normal(0, 3, (2, m.dim))
            va, vb, vm = m.log_joint_batch(np.stack([a, b, (a + b) / 2]))[0]
            assert vm >= (va + vb) / 2 - 1e-9

    def test_synthetic_posterior_recovers_truth(self):
        data = make_synthetic("blr", seed=7, n=500, p=8)
        m = BlrModel(data)
        mean, cov = m.exact_posterior()
        assert np.all(np.abs(mean - np.array(data.truth["b"])) < 3 * np.sqrt(np.diag(cov)))


# ---------------------------------------------------------------------------
# Hierarchical Poisson model
# ---------------------------------------------------------------------------

class TestFrisk:

    def test_toy_hand_computation(self):
        m = FriskModel([0], [0], [5.0], [2])
        z = [-0.3, 0.4, -0.8, 0.25, -0.6]
        mu, la, lb, a, b = z
        expected = (stats.norm.logpdf(mu, 0, 10) + stats.norm.logpdf(la, 0, 10) + stats.norm.logpdf(lb, 0, 10)
                    + stats.norm.logpdf(a, 0, math.sqrt(math.exp(la)))
                    + stats.norm.logpdf(b, 0, math.sqrt(math.exp(lb)))
                    + stats.poisson.logpmf(2, 5.0 * math.exp(mu + a + b)))
        assert m.log_joint(z) == pytest.approx(expected, rel=1e-12)
        assert m.log_joint_batch(np.array([z]))[0][0] == pytest.approx(expected, rel=1e-12)

    def test_synthetic_shape(self):
        data = make_synthetic("frisk", seed=0)
        m = FriskModel.from_dataset(data)
        assert (m.n_eth, m.n_prec) == (3, 32)
        assert data.n == 96
        assert m.dim == 38 and 2 * m.dim == 76
        assert np.all(data.raw_features()[:, 2] >= 1)

    def test_precinct_exchangeability(self, rng):
        data = make_synthetic("frisk", seed=4, E=2, P=6)
        m = FriskModel.from_dataset(data)
        perm = rng.permutation(6)
        inv = np.argsort(perm)
        m2 = FriskModel(m.eth, inv[m.prec], m.exposure, m.counts, 2, 6)
        z = rng.normal(0, 0.5, m.dim)
        z2 = z.copy()
        z2[5:] = z[5:][perm]
        assert m2.log_joint_batch(z2)[0][0] == pytest.approx(m.log_joint_batch(z)[0][0], abs=1e-12)

    def test_invalid_counts(self):
        with pytest.raises(DatasetError):
            FriskModel([0], [0], [5.0], [1.5])
        with pytest.raises(DatasetError):
            FriskModel([0], [0], [0.5], [1])


# ---------------------------------------------------------------------------
# Bayesian neural network
# ---------------------------------------------------------------------------

class TestBnn:

    def test_latent_count(self):
        m = BnnModel(make_synthetic("bnn", seed=0, n=20, p=1), width=30)
        assert m.dim == 93 and 2 * m.dim == 186

    def test_zero_network(self):
        m = MODELS["bnn"]
        ua, ut = 0.3, 1.2
        z = np.concatenate([[ua, ut], np.zeros(m.n_weights)])
        tau = math.exp(ut)
        y = m.data.y
        lik = np.sum(0.5 * np.log(tau / (2 * math.pi)) - tau * y ** 2 / 2)
        log_prior_u = lambda u: stats.gamma.logpdf(math.exp(u), 1.0, scale=10.0) + u
        w_prior = m.n_weights * stats.norm.logpdf(0.0, 0, 1 / math.sqrt(math.exp(ua)))
        expected = log_prior_u(ua) + log_prior_u(ut) + w_prior + lik
        assert m.log_joint(list(z)) == pytest.approx(expected, rel=1e-12)

    def test_against_independent_forward(self, rng):
        m = MODELS["bnn"]
        z = rng.normal(0, 0.7, m.dim)
        p, W = m.data.p, m.width
        w = z[2:]
        W1 = w[:p * W].reshape(p, W)
        b1, W2, b2 = w[p * W:p * W + W], w[p * W + W:p * W + 2 * W], w[-1]
        psi = np.maximum(m.data.X @ W1 + b1, 0) @ W2 + b2
        alpha, tau = math.exp(z[0]), math.exp(z[1])
        expected = (stats.gamma.logpdf(alpha, 1.0, scale=10.0) + z[0] + stats.gamma.logpdf(tau, 1.0, scale=10.0) + z[1]
                    + stats.norm.logpdf(w, 0, 1 / math.sqrt(alpha)).sum()
                    + stats.norm.logpdf(m.data.y, psi, 1 / math.sqrt(tau)).sum())
        assert m.log_joint(list(z)) == pytest.approx(expected, rel=1e-11)

    def test_relu_kink_subgradient(self):
        data = Dataset(np.zeros((1, 1)), np.array([1.0]), ("x",))
        m = BnnModel(data, width=1)
        z = [0.0, 0.0, 0.7, 0.0, 2.0, 0.0]  # pre-activation exactly 0
        _, g = _tape_value_grad(m, z)
        _, gb = m.log_joint_batch(np.array([z]))
        assert np.allclose(g, gb[0], atol=1e-12)


# ---------------------------------------------------------------------------
# Routes agree
# ---------------------------------------------------------------------------

class TestRoutes:

    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_tape_and_batch_agree(self, name, rng):
        m = MODELS[name]
        Z = rng.normal(0, 0.6, (5, m.dim))
        vals, grads = m.log_joint_batch(Z)
        for z, v, g in zip(Z, vals, grads):
            tv, tg = _tape_value_grad(m, z)
            assert tv == pytest.approx(v, rel=1e-12, abs=1e-12)
            assert np.allclose(tg, g, rtol=1e-10, atol=1e-10)

    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_gradient_finite_differences(self, name, rng):
        m = MODELS[name]
        z = rng.normal(0, 0.6, m.dim)
        _, g = m.log_joint_batch(z)
        h = 1e-5
        E = np.eye(m.dim) * h
        fd = (m.log_joint_batch(z + E)[0] - m.log_joint_batch(z - E)[0]) / (2 * h)
        assert np.allclose(g[0], fd, rtol=1e-5, atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            MODELS["blr"].log_joint([0.0])
        with pytest.raises(ValueError):
            MODELS["frisk"].log_joint_batch(np.zeros((2, 3)))

    def test_function_model_fallback(self):
        m = FunctionModel(lambda z: -dt.square(z[0]) / 2, 1)
        v, g = m.log_joint_batch(np.array([[2.0]]))
        assert v[0] == -2.0 and g[0, 0] == -2.0


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class TestData:

    def test_synthetic_deterministic(self):
        a, b = make_synthetic("blr", seed=3), make_synthetic("blr", seed=3)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)

    def test_unknown_kind(self):
        with pytest.raises(DatasetError):
            make_synthetic("svm")

    def test_infeasible_dims(self):
        with pytest.raises(DatasetError):
            make_synthetic("blr", n=0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_zscore_inverse(self, seed):
        r = np.random.default_rng(seed)
        raw = r.normal(r.uniform(-50, 50, 3), r.uniform(0.1, 20, 3), (30, 3))
        path_rows = "a,b,c,y\n" + "\n".join(",".join(repr(float(v)) for v in row) + ",0.0" for row in raw)
        with tempfile.TemporaryDirectory() as tmp:
            f = Path(tmp) / "d.csv"
            f.write_text(path_rows, encoding="utf-8")
            data = load_csv(f, "y")
        assert np.allclose(data.raw_features(), raw, rtol=0, atol=1e-10 * max(1.0, np.abs(raw).max()))
        assert np.allclose(data.X.mean(axis=0), 0, atol=1e-12)

    def test_csv_three_rows(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n", encoding="utf-8")
        data = load_csv(f, "y")
        assert data.n == 3 and data.p == 2 and data.columns == ("x1", "x2")
        assert data.y.tolist() == [3.0, 6.0, 9.0]

    def test_csv_missing_target(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("x1,x2\n1,2\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="'stops'"):
            load_csv(f, "stops")

    def test_csv_non_count(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("x,y\n1,2.5\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="count"):
            load_csv(f, "y", kind="count")

    def test_csv_parse_error_line(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("x,y\n1,2\n3,abc\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="line 3"):
            load_csv(f, "y")

    def test_missing_values_rejected(self):
        with pytest.raises(DatasetError):
            Dataset(np.array([[np.nan]]), np.array([1.0]), ("x",))
