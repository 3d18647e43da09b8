"""Two-layer network ``w^T sigma(F x) / sqrt(k)`` trained in two stages.

Stage one takes a single gradient step on ``F`` with ``w`` frozen at its
initial value; stage two fits ``w`` by ridge regression on a fresh batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg

from .activations import Activation
from .errors import NumericalError
from .hermite import HermiteActivation, QuadratureRule, apply_equivalent, default_rule

AnyActivation = Union[Activation, HermiteActivation]


@dataclass(frozen=True)
class NetworkInit:
    F: np.ndarray  # k x n
    w: np.ndarray  # k
    trace_sigma: float

    @property
    def k(self) -> int:
        return self.F.shape[0]


def init_network(n: int, k: int, trace_sigma: float, rng: np.random.Generator) -> NetworkInit:
    """Rows of ``F`` from ``N(0, I_n / Tr(Sigma))`` and ``w`` from ``N(0, I_k / k)``."""
    if n < 1 or k < 1:
        raise ValueError("n and k must be positive")
    if trace_sigma <= 0:
        raise ValueError("trace_sigma must be positive")
    F = rng.standard_normal((k, n)) / math.sqrt(trace_sigma)
    w = rng.standard_normal(k) / math.sqrt(k)
    return NetworkInit(F, w, float(trace_sigma))


def _check_finite(arr, stage):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {stage}")


def gradient_step(init: NetworkInit, X, y, eta: float, sigma: Activation):
    """One gradient step on the first layer under squared loss.

    Returns ``(G, F_hat)`` with ``F_hat = F + eta * G``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m = X.shape[0]
    if X.shape[1] != init.F.shape[1] or y.shape != (m,):
        raise ValueError("gradient batch dimensions do not match the network")
    k = init.k
    w = init.w
    Z = init.F @ X.T  # k x m
    _check_finite(Z, "preactivations")
    residual = y - (w @ sigma(Z)) / math.sqrt(k)  # m
    R = np.outer(w, residual) * sigma.derivative(Z) / math.sqrt(k)
    _check_finite(R, "backpropagated residual")
    G = (R @ X) / m
    _check_finite(G, "gradient")
    return G, init.F + eta * G


def ridge_second_layer(features, y, lam: float, form: str = "auto") -> np.ndarray:
    """Minimize ``(1/2m) sum (y_i - w^T phi_i / sqrt(k))^2 + (lam/2) ||w||^2``.

    ``features`` is ``m x k`` with rows ``phi_i``. ``form`` picks the primal
    (``k x k``) or dual (``m x m``) system; ``auto`` takes the smaller one.
    """
    Phi = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float)
    m, k = Phi.shape
    if y.shape != (m,):
        raise ValueError("labels do not match the feature rows")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if form == "auto":
        form = "primal" if k <= m else "dual"
    _check_finite(Phi, "ridge features")
    scale = 1.0 / (m * k)
    try:
        if form == "primal":
            with np.errstate(over="ignore", invalid="ignore"):
                A = scale * (Phi.T @ Phi)
            A[np.diag_indices_from(A)] += lam
            _check_finite(A, "ridge Gram matrix")
            rhs = Phi.T @ y / (m * math.sqrt(k))
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), rhs)
        if form == "dual":
            with np.errstate(over="ignore", invalid="ignore"):
                B = scale * (Phi @ Phi.T)
            B[np.diag_indices_from(B)] += lam
            _check_finite(B, "ridge Gram matrix")
            alpha = scipy.linalg.cho_solve(scipy.linalg.cho_factor(B), y)
            return Phi.T @ alpha / (m * math.sqrt(k))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"ridge system is singular at lambda={lam}; use a positive lambda"
        ) from exc
    raise ValueError(f"unknown ridge form {form!r}")


@dataclass(frozen=True)
class TrainedNetwork:
    F_hat: np.ndarray
    w_hat: np.ndarray
    eta: float
    lam: float
    activation: AnyActivation

    @property
    def k(self) -> int:
        return self.F_hat.shape[0]


def features(F_hat, activation: AnyActivation, X, rng: np.random.Generator | None = None) -> np.ndarray:
    """Feature matrix ``act(X F_hat^T)`` of shape ``m x k``."""
    pre = np.asarray(X, dtype=float) @ F_hat.T
    if isinstance(activation, HermiteActivation):
        if rng is None and activation.residual > 0:
            raise ValueError("Hermite activation needs a noise stream")
        return apply_equivalent(activation, pre, rng)
    return activation(pre)


def fit_second_layer(F_hat, activation: AnyActivation, X, y, lam: float, eta: float,
                     rng: np.random.Generator | None = None):
    """Ridge-fit ``w`` on ``(X, y)``; returns the network and the training features used."""
    Phi = features(F_hat, activation, X, rng)
    w_hat = ridge_second_layer(Phi, y, lam)
    return TrainedNetwork(F_hat, w_hat, eta, lam, activation), Phi


def predict(net: TrainedNetwork, X, rng: np.random.Generator | None = None) -> np.ndarray:
    Phi = features(net.F_hat, net.activation, X, rng)
    return Phi @ net.w_hat / math.sqrt(net.k)


def training_error(net: TrainedNetwork, X, y, rng=None, train_features=None) -> float:
    """Ridge objective at ``w_hat``.

    Pass ``train_features`` to score the exact features the ridge fit saw
    (needed for Hermite models, whose noise would otherwise be redrawn).
    """
    if train_features is None:
        yhat = predict(net, X, rng)
    else:
        yhat = train_features @ net.w_hat / math.sqrt(net.k)
    y = np.asarray(y, dtype=float)
    return float(0.5 * np.mean((y - yhat) ** 2) + 0.5 * net.lam * (net.w_hat @ net.w_hat))


def prediction_error(net: TrainedNetwork, X, y, rng=None) -> float:
    """Half mean squared error on a held-out set."""
    yhat = predict(net, X, rng)
    return float(0.5 * np.mean((np.asarray(y, dtype=float) - yhat) ** 2))


def generalization_error(net: TrainedNetwork, spec, target, n_test: int, rng: np.random.Generator,
                         noise_rng: np.random.Generator | None = None) -> float:
    """Monte Carlo estimate of the generalization error on ``n_test`` fresh points."""
    from .mixture import label, sample_batch

    batch = sample_batch(spec, n_test, rng)
    y = label(target, batch.X, batch.comp, len(spec))
    return prediction_error(net, batch.X, y, noise_rng if noise_rng is not None else rng)


def mean_derivative(sigma: Activation, rule: QuadratureRule | None = None) -> float:
    """``E[sigma'(z)]`` for ``z ~ N(0, 1)``."""
    rule = rule or default_rule()
    return rule.expect(sigma.derivative(rule.nodes))
