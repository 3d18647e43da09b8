"""Gaussian mixtures with spiked (identity plus low-rank) component covariances.

Component ``c`` has covariance ``I + sum_i theta_i gamma_i gamma_i^T`` with
orthonormal ``gamma_i``. Nothing here ever forms an ``n x n`` matrix except
the explicit dense fallbacks.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .activations import Activation

ORTHO_TOL = 1e-10
DENSE_LIMIT = 2048


@dataclass(frozen=True)
class CovarianceSpec:
    """``I_n + sum_i thetas[i] * directions[i] directions[i]^T``.

    ``directions`` has shape ``(d, n)``; each row is a unit spike direction.
    """

    dim_n: int
    thetas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    directions: np.ndarray | None = None

    def __post_init__(self):
        thetas = np.atleast_1d(np.asarray(self.thetas, dtype=float))
        dirs = self.directions
        if dirs is None:
            dirs = np.zeros((0, self.dim_n))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float)).reshape(-1, self.dim_n)
        if dirs.shape[0] != thetas.shape[0]:
            raise ValueError("need one direction per spike strength")
        if np.any(thetas <= 0):
            raise ValueError("spike strengths must be positive")
        gram = dirs @ dirs.T
        if np.max(np.abs(gram - np.eye(len(thetas))), initial=0.0) > ORTHO_TOL:
            raise ValueError("spike directions must be orthonormal")
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "directions", dirs)

    @property
    def rank(self) -> int:
        return len(self.thetas)

    @property
    def trace(self) -> float:
        return self.dim_n + float(self.thetas.sum())

    @property
    def spectral_norm(self) -> float:
        return 1.0 + float(self.thetas.max(initial=0.0))

    def sqrt_apply(self, z):
        """``Sigma^{1/2} z`` for a vector or for each row of an ``(m, n)`` array."""
        z = np.asarray(z, dtype=float)
        if self.rank == 0:
            return z.copy()
        proj = z @ self.directions.T
        return z + (proj * (np.sqrt(1.0 + self.thetas) - 1.0)) @ self.directions

    def dense(self) -> np.ndarray:
        return np.eye(self.dim_n) + (self.directions.T * self.thetas) @ self.directions


def cov_sqrt_apply(cov: CovarianceSpec, z):
    return cov.sqrt_apply(z)


@dataclass(frozen=True)
class Component:
    weight: float
    cov: CovarianceSpec
    mean: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.weight <= 1.0:
            raise ValueError("component weight must be in (0, 1]")
        mean = np.zeros(self.cov.dim_n) if self.mean is None else np.asarray(self.mean, dtype=float)
        if mean.shape != (self.cov.dim_n,):
            raise ValueError("mean has the wrong dimension")
        object.__setattr__(self, "mean", mean)


@dataclass(frozen=True)
class MixtureSpec:
    """Mixture of Gaussian components sharing the input dimension.

    Component traces must agree unless ``nonzero_means`` is set; in that case
    a warning is raised when ``||mu_c||^2 / ||Sigma||`` exceeds 10.
    """

    components: tuple[Component, ...]
    nonzero_means: bool = False

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        object.__setattr__(self, "components", comps)
        n = comps[0].cov.dim_n
        if any(c.cov.dim_n != n for c in comps):
            raise ValueError("components disagree on the input dimension")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {total!r}, not 1")
        if self.nonzero_means:
            norm = mixture_covariance(self).spectral_norm
            ratio = max(float(c.mean @ c.mean) for c in comps) / norm
            if ratio > 10.0:
                warnings.warn(f"||mu_c||^2 / ||Sigma|| = {ratio:.2f} exceeds 10", stacklevel=2)
        else:
            if any(np.any(c.mean != 0) for c in comps):
                raise ValueError("nonzero component means require nonzero_means=True")
            traces = [c.cov.trace for c in comps]
            if max(traces) - min(traces) > 1e-9 * max(traces):
                raise ValueError(f"component traces differ: {traces}")

    @property
    def n(self) -> int:
        return self.components[0].cov.dim_n

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def __len__(self):
        return len(self.components)


@dataclass(frozen=True)
class ScalingSpec:
    """Split of the strength exponent ``beta`` between learning rate and spikes."""

    alpha: float
    beta: float
    n: int

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def eta(self) -> float:
        return float(self.n) ** (self.beta * self.alpha)

    @property
    def spike_scale(self) -> float:
        return float(self.n) ** (self.beta * (1.0 - self.alpha))


@dataclass(frozen=True)
class CovarianceSummary:
    spectral_norm: float
    trace: float
    sqrt_spectral_norm: float


def mixture_covariance(spec: MixtureSpec) -> CovarianceSummary:
    """Spectral norm and trace of the overall input covariance.

    The covariance is ``I`` plus a low-rank term supported on the span of all
    spikes and means, so its top eigenvalue comes from a small eigenproblem on
    that span.
    """
    n = spec.n
    rho = spec.weights
    mu_bar = sum(c.weight * c.mean for c in spec.components)
    vecs, coefs = [], []
    for c in spec.components:
        for theta, g in zip(c.cov.thetas, c.cov.directions):
            vecs.append(g)
            coefs.append(c.weight * theta)
    mean_block = spec.nonzero_means and any(np.any(c.mean != 0) for c in spec.components)
    if mean_block:
        for c in spec.components:
            vecs.append(c.mean - mu_bar)
            coefs.append(c.weight)
    trace = n + float(np.dot(rho, [c.cov.thetas.sum() for c in spec.components]))
    if mean_block:
        trace += float(sum(c.weight * (c.mean @ c.mean) for c in spec.components) - mu_bar @ mu_bar)
    if not vecs:
        return CovarianceSummary(1.0, trace, 1.0)

    V = np.array(vecs).T  # n x r
    coefs = np.array(coefs)
    q, r = np.linalg.qr(V)
    diag = np.abs(np.diag(r))
    scale = np.max(np.linalg.norm(V, axis=0))
    if diag.min() <= 1e-10 * scale:
        if n > DENSE_LIMIT:
            raise ValueError(
                f"spike/mean span is rank deficient and n={n} exceeds the dense limit {DENSE_LIMIT}"
            )
        dense = np.eye(n) + (V * coefs) @ V.T
        top = float(np.linalg.eigvalsh(dense)[-1])
    else:
        # Sum_j coefs_j v_j v_j^T restricted to span(V) = R diag(coefs) R^T in the Q basis
        small = (r * coefs) @ r.T
        top = 1.0 + max(float(np.linalg.eigvalsh(0.5 * (small + small.T))[-1]), 0.0)
    return CovarianceSummary(top, trace, math.sqrt(top))


@dataclass
class Dataset:
    """Inputs ``X`` (m x n), labels ``y`` (may be None) and 1-based component indices."""

    X: np.ndarray
    comp: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        if self.X.ndim != 2 or self.comp.shape != (self.X.shape[0],):
            raise ValueError("X must be (m, n) with one component index per row")

    @property
    def m(self) -> int:
        return self.X.shape[0]


def sample_batch(spec: MixtureSpec, m: int, rng: np.random.Generator) -> Dataset:
    """Draw ``m`` points: component from the weights, then ``mu_c + Sigma_c^{1/2} z``."""
    if m < 1:
        raise ValueError("batch size must be positive")
    idx = rng.choice(len(spec), size=m, p=spec.weights)
    X = rng.standard_normal((m, spec.n))
    for c, comp in enumerate(spec.components):
        rows = idx == c
        if rows.any():
            X[rows] = comp.cov.sqrt_apply(X[rows]) + comp.mean
    return Dataset(X, idx + 1)


def orthonormalize(vectors) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass; rows in, rows out."""
    Q = np.array(vectors, dtype=float, copy=True)
    for i in range(Q.shape[0]):
        for _ in range(2):
            for j in range(i):
                Q[i] -= (Q[j] @ Q[i]) * Q[j]
        norm = np.linalg.norm(Q[i])
        if norm < 1e-12:
            raise ValueError("vectors are linearly dependent")
        Q[i] /= norm
    return Q


def build_spiked_mixture(
    n: int,
    weights,
    thetas,
    rng: np.random.Generator,
    alignment: float = 0.0,
) -> MixtureSpec:
    """Random spiked mixture with orthogonal spikes across components.

    ``thetas[c]`` lists the spike strengths of component ``c``. When
    ``alignment`` is nonzero the first spike of component 2 is rotated to
    ``a * gamma_{1,1} + sqrt(1 - a^2) * gamma_perp``.
    """
    ranks = [len(t) for t in thetas]
    if len(ranks) != len(weights):
        raise ValueError("one theta list per component")
    if not 0.0 <= alignment <= 1.0:
        raise ValueError("alignment must be in [0, 1]")
    total = sum(ranks)
    if total > n:
        raise ValueError("more spikes than dimensions")
    basis = orthonormalize(rng.standard_normal((total, n))) if total else np.zeros((0, n))
    blocks, start = [], 0
    for d in ranks:
        blocks.append(basis[start:start + d].copy())
        start += d
    if alignment > 0.0:
        if len(ranks) < 2 or ranks[0] < 1 or ranks[1] < 1:
            raise ValueError("alignment needs a spike in each of the first two components")
        g = alignment * blocks[0][0] + math.sqrt(max(0.0, 1.0 - alignment**2)) * blocks[1][0]
        blocks[1][0] = g / np.linalg.norm(g)
    comps = tuple(
        Component(float(w), CovarianceSpec(n, np.asarray(t, dtype=float), blk))
        for w, t, blk in zip(weights, thetas, blocks)
    )
    return MixtureSpec(comps)


def build_xi(spec: MixtureSpec, mode: str, C: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Target direction with norm ``C / ||Sigma^{1/2}||``.

    ``mode`` is ``"random"`` (uniform on the sphere) or ``"spike_aligned"``
    (along ``gamma_{1,1} + gamma_{2,1}``).
    """
    if C <= 0:
        raise ValueError("C must be positive")
    if mode == "random":
        if rng is None:
            raise ValueError("random direction needs a stream")
        g = rng.standard_normal(spec.n)
    elif mode == "spike_aligned":
        if len(spec) < 2 or spec.components[0].cov.rank < 1 or spec.components[1].cov.rank < 1:
            raise ValueError("spike_aligned needs at least one spike in each of the first two components")
        g = spec.components[0].cov.directions[0] + spec.components[1].cov.directions[0]
    else:
        raise ValueError(f"unknown xi mode {mode!r}")
    norm = np.linalg.norm(g)
    if norm == 0:
        raise ValueError("target direction is zero")
    return g * (C / (norm * mixture_covariance(spec).sqrt_spectral_norm))


@dataclass(frozen=True)
class TargetSpec:
    """Label rule: ``link(xi^T x)`` (single index) or ``2c - 3`` (class sign)."""

    xi: np.ndarray
    kind: str = "single_index"
    link: Activation | None = None

    def __post_init__(self):
        if self.kind not in ("single_index", "class_sign"):
            raise ValueError(f"unknown label kind {self.kind!r}")
        if self.kind == "single_index" and self.link is None:
            raise ValueError("single_index labels need a link function")


def label(target: TargetSpec, X, comp, n_components: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    comp = np.asarray(comp)
    if X.shape[0] != comp.shape[0]:
        raise ValueError("X and comp disagree on the number of rows")
    if target.kind == "single_index":
        if X.shape[1] != target.xi.shape[0]:
            raise ValueError("xi and X disagree on the dimension")
        return target.link(X @ target.xi)
    if (n_components is not None and n_components != 2) or (comp.size and (comp.min() < 1 or comp.max() > 2)):
        raise ValueError("class_sign labels need exactly two components")
    return 2.0 * comp - 3.0
