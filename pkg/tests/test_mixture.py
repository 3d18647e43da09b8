import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from hermite_equiv.activations import IDENTITY, RELU
from hermite_equiv.mixture import (
    Component,
    CovarianceSpec,
    MixtureSpec,
    ScalingSpec,
    TargetSpec,
    build_spiked_mixture,
    build_xi,
    cov_sqrt_apply,
    label,
    mixture_covariance,
    orthonormalize,
    sample_batch,
)


def single(n, thetas=(), dirs=None, weight=1.0):
    dirs = np.zeros((0, n)) if dirs is None else np.atleast_2d(dirs)
    return Component(weight, CovarianceSpec(n, np.asarray(thetas, dtype=float), dirs))


def random_cov(n, d, rng):
    dirs = orthonormalize(rng.standard_normal((d, n)))
    return CovarianceSpec(n, rng.uniform(0.5, 5.0, d), dirs)


class TestCovarianceSpec:
    def test_trace_and_norm(self, rng):
        cov = random_cov(20, 3, rng)
        assert cov.trace == pytest.approx(20 + cov.thetas.sum())
        np.testing.assert_allclose(cov.spectral_norm, 1 + cov.thetas.max())
        np.testing.assert_allclose(cov.dense(), np.eye(20) + (cov.directions.T * cov.thetas) @ cov.directions)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            CovarianceSpec(3, np.array([1.0, 1.0]), np.array([[1.0, 0, 0], [0.1, 1.0, 0]]))

    def test_rejects_nonpositive_theta(self):
        with pytest.raises(ValueError):
            CovarianceSpec(3, np.array([0.0]), np.array([[1.0, 0, 0]]))


class TestSqrtApply:
    def test_no_spikes(self, rng):
        z = rng.standard_normal(7)
        np.testing.assert_array_equal(cov_sqrt_apply(CovarianceSpec(7), z), z)

    def test_single_spike(self):
        cov = CovarianceSpec(4, np.array([3.0]), np.eye(4)[:1])
        np.testing.assert_allclose(cov_sqrt_apply(cov, np.eye(4)[0]), 2 * np.eye(4)[0])

    @pytest.mark.parametrize("n,d", [(8, 1), (32, 3), (64, 5)])
    def test_matches_dense_sqrt(self, n, d, rng):
        cov = random_cov(n, d, rng)
        vals, vecs = np.linalg.eigh(cov.dense())
        root = (vecs * np.sqrt(vals)) @ vecs.T
        Z = rng.standard_normal((10, n))
        np.testing.assert_allclose(cov.sqrt_apply(Z), Z @ root, atol=1e-9)
        np.testing.assert_allclose(cov_sqrt_apply(cov, Z[0]), root @ Z[0], atol=1e-9)
        np.testing.assert_allclose(root, np.real(scipy.linalg.sqrtm(cov.dense())), atol=1e-9)

    def test_monte_carlo_covariance(self):
        rng = np.random.default_rng(5)
        cov = random_cov(6, 2, rng)
        X = cov.sqrt_apply(rng.standard_normal((100_000, 6)))
        emp = X.T @ X / X.shape[0]
        target = cov.dense()
        # Var(x_i x_j) = S_ii S_jj + S_ij^2 for centered Gaussians
        se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / X.shape[0])
        assert np.all(np.abs(emp - target) <= 3 * se + 1e-12)


class TestMixtureCovariance:
    def test_single_spike(self):
        spec = MixtureSpec((single(10, [4.0], np.eye(10)[:1]),))
        s = mixture_covariance(spec)
        assert s.spectral_norm == pytest.approx(5.0)
        assert s.trace == pytest.approx(14.0)
        assert s.sqrt_spectral_norm == pytest.approx(math.sqrt(5.0))

    def test_orthogonal_halves(self):
        e = np.eye(10)
        spec = MixtureSpec((single(10, [4.0], e[:1], 0.5), single(10, [4.0], e[1:2], 0.5)))
        assert mixture_covariance(spec).spectral_norm == pytest.approx(3.0)

    def test_shared_direction_uses_dense_fallback(self):
        e = np.eye(10)
        spec = MixtureSpec((single(10, [4.0], e[:1], 0.5), single(10, [4.0], e[:1], 0.5)))
        assert mixture_covariance(spec).spectral_norm == pytest.approx(5.0)

    def test_against_dense(self, rng):
        spec = build_spiked_mixture(30, [0.3, 0.7], [[2.0, 5.0], [3.5, 3.5]], rng, alignment=0.6)
        dense = sum(c.weight * c.cov.dense() for c in spec.components)
        s = mixture_covariance(spec)
        np.testing.assert_allclose(s.spectral_norm, np.linalg.eigvalsh(dense)[-1], rtol=1e-9)
        np.testing.assert_allclose(s.trace, np.trace(dense), rtol=1e-12)

    def test_with_means_against_dense(self, rng):
        n = 12
        base = build_spiked_mixture(n, [0.4, 0.6], [[2.0], [2.0]], rng)
        mu = rng.standard_normal(n)
        comps = (Component(0.4, base.components[0].cov, mu), Component(0.6, base.components[1].cov, -0.5 * mu))
        spec = MixtureSpec(comps, nonzero_means=True)
        mbar = 0.4 * mu - 0.6 * 0.5 * mu
        dense = sum(c.weight * (c.cov.dense() + np.outer(c.mean, c.mean)) for c in comps) - np.outer(mbar, mbar)
        s = mixture_covariance(spec)
        np.testing.assert_allclose(s.spectral_norm, np.linalg.eigvalsh(dense)[-1], rtol=1e-9)
        np.testing.assert_allclose(s.trace, np.trace(dense), rtol=1e-12)

    def test_trace_identity(self, rng):
        thetas = [[1.5, 2.5], [0.5, 3.5]]
        spec = build_spiked_mixture(40, [0.5, 0.5], thetas, rng)
        expected = 40 + 0.5 * 4.0 + 0.5 * 4.0
        assert mixture_covariance(spec).trace == pytest.approx(expected, abs=1e-9)


class TestMixtureSpec:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum"):
            MixtureSpec((single(3, weight=0.5), single(3, weight=0.4)))

    def test_unequal_traces_rejected(self):
        e = np.eye(5)
        with pytest.raises(ValueError, match="traces"):
            MixtureSpec((single(5, [1.0], e[:1], 0.5), single(5, [2.0], e[1:2], 0.5)))

    def test_means_need_flag(self):
        comp = Component(1.0, CovarianceSpec(3), np.ones(3))
        with pytest.raises(ValueError):
            MixtureSpec((comp,))

    def test_large_mean_warns(self):
        # a common offset adds nothing to Cov(x) but a lot to ||mu_c||
        comp_a = Component(0.5, CovarianceSpec(3), 10 * np.ones(3))
        comp_b = Component(0.5, CovarianceSpec(3), 10 * np.ones(3))
        with pytest.warns(UserWarning, match="exceeds 10"):
            MixtureSpec((comp_a, comp_b), nonzero_means=True)


class TestScalingSpec:
    @given(alpha=st.floats(0, 1), beta=st.floats(0, 1), n=st.integers(1, 10**6))
    def test_product(self, alpha, beta, n):
        s = ScalingSpec(alpha, beta, n)
        assert s.eta * s.spike_scale == pytest.approx(float(n) ** beta, rel=1e-9)

    def test_range(self):
        with pytest.raises(ValueError):
            ScalingSpec(1.5, 0.5, 10)


class TestSampling:
    def test_standard_normal(self):
        spec = MixtureSpec((single(16),))
        X = sample_batch(spec, 100_000, np.random.default_rng(2)).X
        se = 1 / math.sqrt(X.shape[0])
        assert np.all(np.abs(X.mean(0)) < 3 * se * 1.5)
        cov = X.T @ X / X.shape[0]
        off = cov - np.eye(16)
        assert np.all(np.abs(off) < 4 * se * np.sqrt(1 + np.eye(16)))

    def test_component_frequencies(self, rng):
        spec = build_spiked_mixture(5, [0.5, 0.5], [[1.0], [1.0]], rng)
        comp = sample_batch(spec, 10_000, rng).comp
        assert set(np.unique(comp)) == {1, 2}
        assert abs(np.mean(comp == 1) - 0.5) < 3 * math.sqrt(0.25 / 10_000)

    def test_deterministic(self, rng):
        spec = build_spiked_mixture(8, [0.3, 0.7], [[2.0], [2.0]], rng)
        a = sample_batch(spec, 50, np.random.default_rng(9))
        b = sample_batch(spec, 50, np.random.default_rng(9))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.comp, b.comp)

    def test_component_covariances(self):
        rng = np.random.default_rng(11)
        n = 12
        spec = build_spiked_mixture(n, [0.5, 0.5], [[3.0, 1.0], [2.0, 2.0]], rng)
        data = sample_batch(spec, 200_000, rng)
        for c, comp in enumerate(spec.components, start=1):
            X = data.X[data.comp == c]
            emp = X.T @ X / X.shape[0]
            S = comp.cov.dense()
            se = np.sqrt((np.outer(np.diag(S), np.diag(S)) + S**2) / X.shape[0])
            assert np.all(np.abs(emp - S) <= 4 * se)

    def test_means_added(self, rng):
        cov = CovarianceSpec(4)
        spec = MixtureSpec((Component(0.5, cov, np.full(4, 0.5)), Component(0.5, cov, np.full(4, -0.5))),
                           nonzero_means=True)
        data = sample_batch(spec, 40_000, rng)
        np.testing.assert_allclose(data.X[data.comp == 1].mean(0), 0.5, atol=0.03)
        np.testing.assert_allclose(data.X[data.comp == 2].mean(0), -0.5, atol=0.03)

    def test_rejects_empty(self, rng):
        with pytest.raises(ValueError):
            sample_batch(MixtureSpec((single(2),)), 0, rng)


class TestSpikedMixture:
    def test_orthonormal_across_components(self, rng):
        spec = build_spiked_mixture(50, [0.2, 0.3, 0.5], [[1.0, 5.0], [3.0, 3.0], [1.5, 4.5]], rng)
        D = np.vstack([c.cov.directions for c in spec.components])
        np.testing.assert_allclose(D @ D.T, np.eye(6), atol=1e-10)

    @pytest.mark.parametrize("a", [0.0, 0.5, 0.9, 1.0])
    def test_alignment(self, a, rng):
        spec = build_spiked_mixture(30, [0.5, 0.5], [[2.0], [2.0]], rng, alignment=a)
        g1 = spec.components[0].cov.directions[0]
        g2 = spec.components[1].cov.directions[0]
        assert abs(g1 @ g2) == pytest.approx(a, abs=1e-12)

    def test_too_many_spikes(self, rng):
        with pytest.raises(ValueError):
            build_spiked_mixture(2, [1.0], [[1.0, 1.0, 1.0]], rng)


class TestXiAndLabels:
    def test_identity_random(self, rng):
        spec = MixtureSpec((single(9),))
        assert np.linalg.norm(build_xi(spec, "random", 1.0, rng)) == pytest.approx(1.0)

    @pytest.mark.parametrize("mode", ["random", "spike_aligned"])
    def test_norm_with_spike(self, mode, rng):
        e = np.eye(6)
        spec = MixtureSpec((single(6, [3.0], e[:1], 0.5), single(6, [3.0], e[:1], 0.5)))
        assert np.linalg.norm(build_xi(spec, mode, 1.0, rng)) == pytest.approx(0.5, rel=1e-9)

    def test_spike_aligned_direction(self, rng):
        spec = build_spiked_mixture(20, [0.5, 0.5], [[4.0], [4.0]], rng)
        xi = build_xi(spec, "spike_aligned", 2.0, rng)
        g = spec.components[0].cov.directions[0] + spec.components[1].cov.directions[0]
        np.testing.assert_allclose(xi / np.linalg.norm(xi), g / np.linalg.norm(g), atol=1e-12)
        assert np.linalg.norm(xi) == pytest.approx(2.0 / math.sqrt(3.0))

    def test_spike_aligned_needs_spikes(self, rng):
        spec = MixtureSpec((single(4, weight=0.5), single(4, weight=0.5)))
        with pytest.raises(ValueError):
            build_xi(spec, "spike_aligned", 1.0)

    def test_single_index(self):
        target = TargetSpec(np.eye(3)[0], "single_index", RELU)
        np.testing.assert_allclose(label(target, np.array([[2.0, 1.0, 1.0]]), np.array([1])), [2.0])

    def test_zero_xi(self, rng):
        target = TargetSpec(np.zeros(3), "single_index", IDENTITY)
        np.testing.assert_array_equal(label(target, rng.standard_normal((4, 3)), np.ones(4, int)), 0.0)

    def test_class_sign(self):
        target = TargetSpec(np.zeros(2), "class_sign")
        np.testing.assert_array_equal(label(target, np.zeros((3, 2)), np.array([1, 2, 2])), [-1, 1, 1])
        with pytest.raises(ValueError):
            label(target, np.zeros((1, 2)), np.array([1]), n_components=3)

    @pytest.mark.parametrize("beta", [0.1, 0.4, 0.74, 0.9])
    def test_label_variance_bounded(self, beta):
        # spike-aligned target; a random direction mostly misses the spikes, see notes
        n, C = 400, 1.0
        rng = np.random.default_rng(int(beta * 100))
        theta = n**beta
        spec = build_spiked_mixture(n, [0.5, 0.5], [[theta], [theta]], rng)
        xi = build_xi(spec, "spike_aligned", C, rng)
        X = sample_batch(spec, 20_000, rng).X
        var = np.var(X @ xi)
        assert C**2 / 4 <= var <= 4 * C**2


@given(st.integers(1, 6), st.integers(6, 20), st.integers(0, 2**31))
def test_orthonormalize_property(d, n, seed):
    Q = orthonormalize(np.random.default_rng(seed).standard_normal((d, n)))
    np.testing.assert_allclose(Q @ Q.T, np.eye(d), atol=1e-12)
