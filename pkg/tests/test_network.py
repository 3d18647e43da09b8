import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hermite_equiv.activations import IDENTITY, RELU, SIGMOID, TANH
from hermite_equiv.errors import NumericalError
from hermite_equiv.hermite import HermiteActivation, build_equivalent_activation
from hermite_equiv.mixture import MixtureSpec, Component, CovarianceSpec, TargetSpec
from hermite_equiv.network import (
    NetworkInit,
    TrainedNetwork,
    fit_second_layer,
    generalization_error,
    gradient_step,
    init_network,
    predict,
    prediction_error,
    ridge_second_layer,
    training_error,
)

from oracles import gradient_loops


def ridge_objective_grad(Phi, y, lam, w):
    m, k = Phi.shape
    r = y - Phi @ w / math.sqrt(k)
    return -Phi.T @ r / (m * math.sqrt(k)) + lam * w


def scalar(sigma):
    return lambda t: float(sigma(np.array(t))), lambda t: float(sigma.derivative(np.array(t)))


class TestInit:
    def test_variances(self):
        init = init_network(400, 300, 250.0, np.random.default_rng(0))
        np.testing.assert_allclose(init.F.var(), 1 / 250.0, rtol=0.05)
        np.testing.assert_allclose(init.w.var(), 1 / 300.0, rtol=0.2)
        np.testing.assert_allclose(np.mean(np.sum(init.F**2, 1)), 400 / 250.0, rtol=0.05)

    def test_unit_preactivation_variance(self, rng):
        n = 500
        init = init_network(n, 200, float(n), rng)
        X = rng.standard_normal((200, n))
        np.testing.assert_allclose(np.mean((X @ init.F.T) ** 2), 1.0, rtol=0.05)

    def test_deterministic(self):
        a = init_network(5, 4, 5.0, np.random.default_rng(3))
        b = init_network(5, 4, 5.0, np.random.default_rng(3))
        np.testing.assert_array_equal(a.F, b.F)
        np.testing.assert_array_equal(a.w, b.w)

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            init_network(0, 3, 1.0, rng)
        with pytest.raises(ValueError):
            init_network(3, 3, 0.0, rng)


class TestGradientStep:
    @pytest.mark.parametrize("sigma", [RELU, TANH, SIGMOID, IDENTITY])
    def test_against_loop_oracle(self, sigma):
        rng = np.random.default_rng(21)
        f, df = scalar(sigma)
        for _ in range(5):
            k, m, n = rng.integers(1, 9, size=3)
            init = NetworkInit(rng.standard_normal((k, n)), rng.standard_normal(k), 1.0)
            X, y = rng.standard_normal((m, n)), rng.standard_normal(m)
            G, F_hat = gradient_step(init, X, y, 0.7, sigma)
            ref = np.array(gradient_loops(init.F.tolist(), init.w.tolist(), X.tolist(), y.tolist(), f, df))
            np.testing.assert_allclose(G, ref, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(F_hat, init.F + 0.7 * G, rtol=0, atol=1e-15)

    def test_hand_case(self):
        # k = m = n = 2, identity activation, worked out by hand:
        # pre = F X^T = [[1, 0], [0, 2]]; fit_s = (w . pre[:, s]) / sqrt2 = [1/sqrt2, -2/sqrt2]
        F = np.array([[1.0, 0.0], [0.0, 1.0]])
        w = np.array([1.0, -1.0])
        X = np.array([[1.0, 0.0], [0.0, 2.0]])
        y = np.array([1.0, 0.0])
        G, _ = gradient_step(NetworkInit(F, w, 1.0), X, y, 1.0, IDENTITY)
        r = y - np.array([1.0, -2.0]) / math.sqrt(2)
        expected = np.outer(w, r) @ X / (2 * math.sqrt(2))
        np.testing.assert_allclose(G, expected, atol=1e-15)

    def test_zero_second_layer(self, rng):
        init = NetworkInit(rng.standard_normal((3, 4)), np.zeros(3), 1.0)
        G, F_hat = gradient_step(init, rng.standard_normal((5, 4)), rng.standard_normal(5), 2.0, RELU)
        np.testing.assert_array_equal(G, 0.0)
        np.testing.assert_array_equal(F_hat, init.F)

    def test_identity_rank_one(self, rng):
        init = init_network(20, 15, 20.0, rng)
        G, _ = gradient_step(init, rng.standard_normal((30, 20)), rng.standard_normal(30), 1.0, IDENTITY)
        s = np.linalg.svd(G, compute_uv=False)
        assert s[1] <= 1e-12 * s[0]

    def test_non_finite_reports_stage(self, rng):
        init = NetworkInit(np.array([[np.inf]]), np.ones(1), 1.0)
        with pytest.raises(NumericalError, match="preactivations"):
            gradient_step(init, np.ones((1, 1)), np.ones(1), 1.0, RELU)

    def test_shape_check(self, rng):
        init = init_network(3, 2, 3.0, rng)
        with pytest.raises(ValueError):
            gradient_step(init, np.ones((4, 2)), np.ones(4), 1.0, RELU)


class TestRidge:
    def test_scalar(self):
        np.testing.assert_allclose(ridge_second_layer(np.array([[1.0]]), np.array([2.0]), 0.0), [2.0])

    @pytest.mark.parametrize("m,k", [(60, 40), (40, 60), (30, 30), (5, 120)])
    def test_primal_dual_agree(self, m, k, rng):
        Phi, y = rng.standard_normal((m, k)), rng.standard_normal(m)
        a = ridge_second_layer(Phi, y, 1e-3, "primal")
        b = ridge_second_layer(Phi, y, 1e-3, "dual")
        np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-12)

    def test_stationarity(self, rng):
        Phi, y = rng.standard_normal((50, 80)), rng.standard_normal(50)
        w = ridge_second_layer(Phi, y, 1e-4)
        assert np.linalg.norm(ridge_objective_grad(Phi, y, 1e-4, w)) <= 1e-8 * (1 + np.linalg.norm(w))

    def test_heavy_regularization(self, rng):
        Phi, y = rng.standard_normal((20, 10)), rng.standard_normal(20)
        w = ridge_second_layer(Phi, y, 1e9)
        scale = np.linalg.norm(Phi.T @ y) / (20 * math.sqrt(10)) / 1e9
        assert np.linalg.norm(w) <= scale * (1 + 1e-6)

    def test_norm_monotone_in_lambda(self, rng):
        Phi, y = rng.standard_normal((40, 25)), rng.standard_normal(40)
        norms = [np.linalg.norm(ridge_second_layer(Phi, y, lam)) for lam in np.logspace(-6, 2, 17)]
        assert np.all(np.diff(norms) <= 1e-12)

    def test_singular_at_zero_lambda(self):
        Phi = np.ones((4, 3))
        with pytest.raises(NumericalError, match="positive lambda"):
            ridge_second_layer(Phi, np.ones(4), 0.0, "primal")

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            ridge_second_layer(np.ones((3, 2)), np.ones(2), 1.0)
        with pytest.raises(ValueError):
            ridge_second_layer(np.ones((3, 2)), np.ones(3), -1.0)
        with pytest.raises(ValueError):
            ridge_second_layer(np.ones((3, 2)), np.ones(3), 1.0, "qr")


class TestPrediction:
    def test_zero_weights(self, rng):
        net = TrainedNetwork(rng.standard_normal((3, 4)), np.zeros(3), 1.0, 0.1, RELU)
        X, y = rng.standard_normal((6, 4)), rng.standard_normal(6)
        np.testing.assert_array_equal(predict(net, X), 0.0)
        assert training_error(net, X, y) == pytest.approx(0.5 * np.mean(y**2))

    def test_linear_readout(self, rng):
        net = TrainedNetwork(np.eye(3)[:1], np.ones(1), 1.0, 0.0, IDENTITY)
        X = rng.standard_normal((5, 3))
        np.testing.assert_allclose(predict(net, X), X[:, 0])

    def test_hermite_needs_stream(self, rng):
        act = build_equivalent_activation(RELU, 1.0, 3)
        net = TrainedNetwork(rng.standard_normal((3, 4)), np.ones(3), 1.0, 0.1, act)
        with pytest.raises(ValueError):
            predict(net, rng.standard_normal((2, 4)))

    def test_noiseless_hermite_repeatable(self, rng):
        act = HermiteActivation(2, (0.0, 1.0), 0.0, 1.0)
        net = TrainedNetwork(rng.standard_normal((3, 4)), np.ones(3), 1.0, 0.1, act)
        X = rng.standard_normal((5, 4))
        np.testing.assert_array_equal(predict(net, X), predict(net, X))

    def test_training_error_below_zero_predictor(self, rng):
        F = rng.standard_normal((30, 10)) / math.sqrt(10)
        X, y = rng.standard_normal((40, 10)), rng.standard_normal(40)
        for lam in (1e-4, 1e-1, 10.0):
            net, Phi = fit_second_layer(F, TANH, X, y, lam, 1.0)
            assert training_error(net, X, y, train_features=Phi) <= 0.5 * np.mean(y**2) + 1e-15

    def test_generalization_error_scaling(self):
        n = 4
        spec = MixtureSpec((Component(1.0, CovarianceSpec(n)),))
        target = TargetSpec(np.eye(n)[0], "single_index", IDENTITY)
        net = TrainedNetwork(np.eye(n)[1:2], np.ones(1), 1.0, 0.0, IDENTITY)
        ses = []
        for n_test in (1000, 10_000, 100_000):
            rng = np.random.default_rng(n_test)
            vals = [generalization_error(net, spec, target, n_test, rng) for _ in range(100)]
            np.testing.assert_allclose(np.mean(vals), 1.0, rtol=0.05)  # E[(x1 - x2)^2] / 2
            ses.append(np.std(vals, ddof=1))
        ratios = np.array(ses[:-1]) / np.array(ses[1:])
        np.testing.assert_allclose(ratios, math.sqrt(10), rtol=0.3)

    def test_prediction_error(self):
        net = TrainedNetwork(np.eye(2)[:1], np.array([2.0]), 1.0, 0.0, IDENTITY)
        X = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert prediction_error(net, X, np.array([0.0, 1.0])) == pytest.approx(0.5 * (4 + 1) / 2)


@given(m=st.integers(1, 30), k=st.integers(1, 30), lam=st.floats(1e-3, 10.0), seed=st.integers(0, 2**31))
def test_ridge_primal_dual_property(m, k, lam, seed):
    rng = np.random.default_rng(seed)
    Phi, y = rng.standard_normal((m, k)), rng.standard_normal(m)
    a = ridge_second_layer(Phi, y, lam, "primal")
    b = ridge_second_layer(Phi, y, lam, "dual")
    np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-12)
    assert np.linalg.norm(ridge_objective_grad(Phi, y, lam, a)) <= 1e-8 * (1 + np.linalg.norm(a))
