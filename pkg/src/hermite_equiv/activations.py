"""Pointwise activation functions with their first derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import expit

KINDS = ("relu", "tanh", "sigmoid", "identity", "polynomial")


@dataclass(frozen=True)
class Activation:
    """An activation ``sigma`` together with ``sigma'``.

    ``coeffs`` is only used by the ``polynomial`` kind and holds monomial
    coefficients in increasing degree (``c0 + c1 x + c2 x^2 + ...``).
    """

    kind: str
    coeffs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "polynomial":
            if len(self.coeffs) == 0:
                raise ValueError("polynomial activation needs at least one coefficient")
            if not np.all(np.isfinite(self.coeffs)):
                raise ValueError("polynomial coefficients must be finite")
        elif self.coeffs:
            raise ValueError(f"{self.kind} activation takes no coefficients")

    @property
    def name(self) -> str:
        return self.kind

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "relu":
            return np.maximum(x, 0.0)
        if self.kind == "tanh":
            return np.tanh(x)
        if self.kind == "sigmoid":
            return expit(x)
        if self.kind == "identity":
            return x.copy()
        return P.polyval(x, self.coeffs)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "relu":
            # subgradient convention: sigma'(0) = 0
            return (x > 0).astype(float)
        if self.kind == "tanh":
            return 1.0 - np.tanh(x) ** 2
        if self.kind == "sigmoid":
            s = expit(x)
            return s * (1.0 - s)
        if self.kind == "identity":
            return np.ones_like(x)
        if len(self.coeffs) == 1:
            return np.zeros_like(x)
        return P.polyval(x, P.polyder(self.coeffs))


RELU = Activation("relu")
TANH = Activation("tanh")
SIGMOID = Activation("sigmoid")
IDENTITY = Activation("identity")


def polynomial(coeffs) -> Activation:
    return Activation("polynomial", tuple(float(c) for c in coeffs))


def get_activation(name: str | Activation) -> Activation:
    """Look up an activation by name (``relu``, ``tanh``, ``sigmoid``, ``identity``)."""
    if isinstance(name, Activation):
        return name
    key = name.strip().lower()
    if key in ("relu", "tanh", "sigmoid", "identity"):
        return Activation(key)
    raise ValueError(f"unknown activation {name!r}")
