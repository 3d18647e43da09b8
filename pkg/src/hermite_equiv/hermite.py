"""Probabilist's Hermite polynomials and the equivalent polynomial activation.

The equivalent activation of degree ``l`` and scale ``b`` is

    sigma_hat(x) = sum_{j<l} h_j / j! * He_j(x / b) + h_star * z,   z ~ N(0, 1),

with ``h_j = E[He_j(z) sigma(b z)]`` and ``h_star`` chosen so that
``E[sigma_hat(b z)^2] = E[sigma(b z)^2]``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from .activations import Activation
from .errors import NumericalError

MAX_DEGREE = 64
DEFAULT_ORDER = 200
DEFICIT_TOL = 1e-10


def hermite_eval(j: int, x):
    """Evaluate ``He_j`` at ``x`` with the three-term recurrence.

    Works elementwise on arrays. Degrees above ``MAX_DEGREE`` are rejected.
    """
    if j < 0 or int(j) != j:
        raise ValueError(f"degree must be a nonnegative integer, got {j!r}")
    if j > MAX_DEGREE:
        raise ValueError(f"degree {j} exceeds the recurrence guard {MAX_DEGREE}")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if j == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = x.copy()
    for i in range(1, j):
        h_prev, h = h, x * h - i * h_prev
    return h if h.ndim else float(h)


def hermite_table(l: int, x) -> np.ndarray:
    """Stack ``He_0(x) .. He_{l-1}(x)`` along a new leading axis."""
    if l < 1 or l > MAX_DEGREE + 1:
        raise ValueError(f"table size must be in [1, {MAX_DEGREE + 1}], got {l}")
    x = np.asarray(x, dtype=float)
    out = np.empty((l,) + x.shape)
    out[0] = 1.0
    if l > 1:
        out[1] = x
    for i in range(1, l - 1):
        out[i + 1] = x * out[i] - i * out[i - 1]
    return out


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for expectations under the standard normal law."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def expect(self, values) -> float:
        return float(np.dot(self.weights, values))


def gauss_hermite_rule(order: int = DEFAULT_ORDER) -> QuadratureRule:
    """Gauss-Hermite rule rescaled to the N(0, 1) weight.

    Exact for polynomials up to degree ``2 * order - 1`` but converges slowly
    for integrands with kinks (ReLU at 0).
    """
    if not 1 <= order <= 300:
        raise ValueError("Gauss-Hermite order must be in [1, 300]")
    x, w = hermegauss(order)
    return QuadratureRule(order, x, w / math.sqrt(2.0 * math.pi))


def split_legendre_rule(order: int = DEFAULT_ORDER, cutoff: float = 14.0) -> QuadratureRule:
    """Gauss-Legendre on ``[-cutoff, 0]`` and ``[0, cutoff]`` with the normal density folded in.

    Splitting at zero keeps piecewise-smooth activations (ReLU) at spectral
    accuracy. Mass beyond ``cutoff`` is below 1e-40 and is dropped.
    """
    if order < 2 or order % 2:
        raise ValueError("split rule order must be an even integer >= 2")
    t, w = leggauss(order // 2)
    x = (t + 1.0) * (cutoff / 2.0)
    w = w * (cutoff / 2.0) * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    nodes = np.concatenate([-x[::-1], x])
    weights = np.concatenate([w[::-1], w])
    return QuadratureRule(order, nodes, weights)


@functools.lru_cache(maxsize=8)
def default_rule(order: int = DEFAULT_ORDER) -> QuadratureRule:
    return split_legendre_rule(order)


def _activation_at_nodes(sigma: Activation, b: float, rule: QuadratureRule) -> np.ndarray:
    vals = sigma(b * rule.nodes)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericalError(
            f"{sigma.name}(b * z) is not finite at quadrature node z={rule.nodes[i]!r}"
        )
    return vals


def hermite_coefficients(sigma: Activation, b: float, l: int, rule: QuadratureRule | None = None) -> np.ndarray:
    """Return ``h_j = E[He_j(z) sigma(b z)]`` for ``j = 0 .. l-1``."""
    if b <= 0:
        raise ValueError("scale b must be positive")
    if l < 1:
        raise ValueError("l must be >= 1")
    rule = rule or default_rule()
    if rule.order < 4 * l:
        raise ValueError(f"quadrature order {rule.order} too low for l={l} (need >= {4 * l})")
    vals = _activation_at_nodes(sigma, b, rule)
    table = hermite_table(l, rule.nodes)
    return table @ (rule.weights * vals)


def second_moment(sigma: Activation, b: float, rule: QuadratureRule | None = None) -> float:
    """``E[sigma(b z)^2]`` for ``z ~ N(0, 1)``."""
    rule = rule or default_rule()
    vals = _activation_at_nodes(sigma, b, rule)
    return rule.expect(vals * vals)


def _parseval_sum(coeffs) -> float:
    return float(sum(h * h / math.factorial(j) for j, h in enumerate(coeffs)))


def residual_coefficient(sigma: Activation, b: float, coeffs, rule: QuadratureRule | None = None) -> float:
    """``h_star = sqrt(E[sigma(b z)^2] - sum_j h_j^2 / j!)``.

    A negative deficit down to ``-1e-10`` is rounding and clamps to zero;
    anything below that means the coefficients do not belong to ``sigma``.
    """
    deficit = second_moment(sigma, b, rule) - _parseval_sum(coeffs)
    if deficit < -DEFICIT_TOL:
        raise NumericalError(
            f"Hermite coefficients exceed the second moment by {-deficit:.3e}; "
            "they were not computed for this activation and scale"
        )
    return math.sqrt(max(deficit, 0.0))


@dataclass(frozen=True)
class HermiteActivation:
    """Degree-``l`` Hermite polynomial plus calibrated Gaussian noise."""

    degree_l: int
    coeffs: tuple[float, ...]
    residual: float
    scale_b: float

    def __post_init__(self):
        if self.degree_l < 1 or len(self.coeffs) != self.degree_l:
            raise ValueError("coeffs must hold exactly degree_l values")
        if self.scale_b <= 0:
            raise ValueError("scale_b must be positive")
        if self.residual < 0:
            raise ValueError("residual must be nonnegative")

    @property
    def name(self) -> str:
        return f"hermite{self.degree_l}"

    def polynomial(self, x) -> np.ndarray:
        """Deterministic part ``sum_j h_j / j! He_j(x / b)``."""
        x = np.asarray(x, dtype=float) / self.scale_b
        out = np.full(x.shape, self.coeffs[0])
        if self.degree_l == 1:
            return out
        h_prev = np.ones_like(x)
        h = x.copy()
        out += self.coeffs[1] * h
        for j in range(2, self.degree_l):
            h_prev, h = h, x * h - (j - 1) * h_prev
            out += (self.coeffs[j] / math.factorial(j)) * h
        return out

    def second_moment(self) -> float:
        """``E[sigma_hat(b z)^2]``, noise included."""
        return self.residual**2 + _parseval_sum(self.coeffs)


def build_equivalent_activation(sigma: Activation, b: float, l: int, rule: QuadratureRule | None = None) -> HermiteActivation:
    rule = rule or default_rule()
    coeffs = hermite_coefficients(sigma, b, l, rule)
    residual = residual_coefficient(sigma, b, coeffs, rule)
    return HermiteActivation(l, tuple(float(c) for c in coeffs), residual, float(b))


def apply_equivalent(act: HermiteActivation, preactivations, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``sigma_hat`` entrywise, drawing fresh noise for every entry.

    ``rng`` may be omitted only when the residual is zero.
    """
    x = np.asarray(preactivations, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite preactivations")
    out = act.polynomial(x)
    if act.residual > 0.0:
        if rng is None:
            raise ValueError("a noise stream is required when the residual is nonzero")
        out += act.residual * rng.standard_normal(x.shape)
    return out
