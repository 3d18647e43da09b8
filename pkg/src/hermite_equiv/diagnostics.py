"""Empirical checks of the structural decompositions behind the Hermite equivalence.

* spike/bulk split of the one-step gradient, ``G = u v^T + Delta``;
* structure/bulk split of the whitened input, ``z = Gamma kappa + z_perp``;
* Monte Carlo conditional moments of the features given ``(c, kappa)``;
* log-log scaling slopes of the quantities the equivalence relies on.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .activations import RELU, Activation
from .errors import NumericalError
from .hermite import HermiteActivation, apply_equivalent
from .mixture import (
    CovarianceSpec,
    TargetSpec,
    build_spiked_mixture,
    build_xi,
    label,
    mixture_covariance,
    sample_batch,
)
from .network import gradient_step, init_network, mean_derivative
from .seeding import spawn_streams, trial_seed


def spectral_norm(A, tol: float = 1e-6, max_iter: int = 500, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``.

    The start vector comes from a fixed seed. Stops when the estimate changes
    by less than ``tol`` relative; otherwise warns with the last residual and
    returns the current estimate.
    """
    A = np.asarray(A, dtype=float)
    x = np.random.default_rng(seed).standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    resid = math.inf
    for _ in range(max_iter):
        y = A @ x
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = A.T @ y
        x /= np.linalg.norm(x)
        resid = abs(new - est) / new
        est = new
        if resid < tol:
            return est
    warnings.warn(f"power iteration stopped after {max_iter} steps, relative change {resid:.2e}",
                  RuntimeWarning, stacklevel=2)
    return est


@dataclass(frozen=True)
class GradientDecomposition:
    u: np.ndarray
    v: np.ndarray
    delta: np.ndarray
    norm_u: float
    norm_v: float
    norm_delta: float

    def reconstruct(self) -> np.ndarray:
        return np.outer(self.u, self.v) + self.delta


def spike_bulk_decompose(G, w, X, y, sigma: Activation, exact_norms: bool = False) -> GradientDecomposition:
    """Split ``G`` into ``u v^T + Delta`` with ``u = E[sigma'(z)] w`` and ``v = X^T y / (m sqrt(k))``."""
    G = np.asarray(G, dtype=float)
    X = np.asarray(X, dtype=float)
    m = X.shape[0]
    k = G.shape[0]
    u = mean_derivative(sigma) * np.asarray(w, dtype=float)
    v = X.T @ np.asarray(y, dtype=float) / (m * math.sqrt(k))
    delta = G - np.outer(u, v)
    norm_delta = float(np.linalg.norm(delta, 2)) if exact_norms else spectral_norm(delta)
    return GradientDecomposition(u, v, delta, float(np.linalg.norm(u)), float(np.linalg.norm(v)), norm_delta)


def bulk_operator(F, eta: float, delta) -> np.ndarray:
    """``F_perp = F + eta * Delta``."""
    return np.asarray(F) + eta * np.asarray(delta)


@dataclass(frozen=True)
class StructureBulkSplit:
    Gamma: np.ndarray  # n x (d + 1), columns v, gamma_1 .. gamma_d
    kappa: np.ndarray
    z_perp: np.ndarray
    a_struct: np.ndarray
    F_perp: np.ndarray

    def projector_apply(self, Z) -> np.ndarray:
        """Project rows of ``Z`` onto the orthogonal complement of ``span(Gamma)``."""
        return project_out(self.Gamma, Z)


def _structure_basis(cov: CovarianceSpec, v) -> np.ndarray:
    Gamma = np.column_stack([np.asarray(v, dtype=float), cov.directions.T])
    s = np.linalg.svd(Gamma / np.linalg.norm(Gamma, axis=0), compute_uv=False)
    if s[-1] < 1e-8:
        raise NumericalError("v is (nearly) collinear with the spike directions; Gamma is rank deficient")
    return Gamma


def project_out(Gamma, Z) -> np.ndarray:
    """``Z (I - Gamma (Gamma^T Gamma)^{-1} Gamma^T)`` for a vector or row stack."""
    Z = np.asarray(Z, dtype=float)
    coef = np.linalg.solve(Gamma.T @ Gamma, Gamma.T @ Z.T)
    return Z - (Gamma @ coef).T


def structure_kappa(Gamma, z) -> np.ndarray:
    return np.linalg.solve(Gamma.T @ Gamma, Gamma.T @ np.asarray(z, dtype=float))


def structure_bulk_split(F_hat, F_perp, cov: CovarianceSpec, v, z) -> StructureBulkSplit:
    """Decompose ``F_hat Sigma_c^{1/2} z`` into bulk ``F_perp z_perp`` and structure ``a``."""
    Gamma = _structure_basis(cov, v)
    kappa = structure_kappa(Gamma, z)
    z_perp = np.asarray(z, dtype=float) - Gamma @ kappa
    a_struct = np.asarray(F_hat) @ cov.sqrt_apply(Gamma @ kappa)
    return StructureBulkSplit(Gamma, kappa, z_perp, a_struct, np.asarray(F_perp))


@dataclass
class ConditionalMoments:
    nu: np.ndarray  # k
    psi: np.ndarray  # k x n
    phi: np.ndarray  # k x k, symmetrized and PSD-projected
    sample_count: int
    second_moment_diag: np.ndarray = field(default=None)
    psd_change: float = 0.0

    @property
    def flagged(self) -> bool:
        """PSD projection moved ``phi`` by more than 1% in Frobenius norm."""
        return self.psd_change > 0.01


def psd_project(S) -> tuple[np.ndarray, float]:
    """Clamp negative eigenvalues of the symmetric part; return it and the relative change."""
    S = 0.5 * (S + S.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() >= 0:
        return S, 0.0
    P = (vecs * np.clip(vals, 0, None)) @ vecs.T
    base = np.linalg.norm(S)
    return P, float(np.linalg.norm(P - S) / base) if base else 0.0


def conditional_moments_mc(
    split: StructureBulkSplit,
    act,
    n_mc: int,
    rng: np.random.Generator,
    noise_rng: np.random.Generator | None = None,
    chunk: int = 8192,
) -> ConditionalMoments:
    """Monte Carlo moments of ``act(a + F_perp z_perp)`` given ``(c, kappa)``.

    ``z_perp`` is a standard normal projected off ``span(Gamma)``. Running two
    activations with identically seeded ``rng`` gives common random numbers.
    Chunks have a fixed size and per-chunk sums are reduced with a pairwise
    ``np.sum``, so the result does not depend on how chunks are scheduled.

    ``phi`` is the empirical covariance of ``act - nu - Psi z_perp``. It
    targets ``Cov - Psi Psi^T`` but stays PSD and is far less noisy along
    near-null directions than subtracting the plug-in ``Psi Psi^T``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be positive")
    if isinstance(act, HermiteActivation) and act.residual > 0 and noise_rng is None:
        raise ValueError("Hermite activation needs a noise stream")
    F_perp = split.F_perp
    k, n = F_perp.shape
    sums, zsums, cross, outer, zouter = [], [], [], [], []
    done = 0
    while done < n_mc:
        b = min(chunk, n_mc - done)
        Zp = split.projector_apply(rng.standard_normal((b, n)))
        pre = split.a_struct + Zp @ F_perp.T
        if isinstance(act, HermiteActivation):
            feats = apply_equivalent(act, pre, noise_rng)
        else:
            feats = act(pre)
        sums.append(feats.sum(axis=0))
        zsums.append(Zp.sum(axis=0))
        cross.append(feats.T @ Zp)
        outer.append(feats.T @ feats)
        zouter.append(Zp.T @ Zp)
        done += b
    nu = np.sum(sums, axis=0) / n_mc
    zbar = np.sum(zsums, axis=0) / n_mc
    psi = np.sum(cross, axis=0) / n_mc
    second = np.sum(outer, axis=0) / n_mc
    S = np.sum(zouter, axis=0) / n_mc
    # empirical covariance of the residual phi - nu - Psi z_perp; PSD up to rounding
    cov = second - np.outer(nu, nu)
    mixed = psi @ psi.T - np.outer(psi @ zbar, nu)
    phi, change = psd_project(cov - mixed - mixed.T + psi @ S @ psi.T)
    return ConditionalMoments(nu, psi, phi, n_mc, np.diag(second).copy(), change)


def conditional_feature_sample(moments: ConditionalMoments, z_perp, rng: np.random.Generator) -> np.ndarray:
    """``nu + Psi z_perp + Phi^{1/2} g`` for a vector or row stack of ``z_perp``."""
    vals, vecs = np.linalg.eigh(0.5 * (moments.phi + moments.phi.T))
    root = (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T
    z_perp = np.asarray(z_perp, dtype=float)
    k = moments.nu.shape[0]
    if z_perp.ndim == 1:
        return moments.nu + moments.psi @ z_perp + root @ rng.standard_normal(k)
    g = rng.standard_normal((z_perp.shape[0], k))
    return moments.nu + z_perp @ moments.psi.T + g @ root


QUANTITIES = ("norm_delta", "norm_v", "norm_u", "max_a", "max_offdiag_ff", "max_diag_ff")


@dataclass
class ScalingReport:
    grid: list[int]
    alpha: float
    beta: float
    samples: dict[str, np.ndarray]  # quantity -> (len(grid), trials)
    slopes: dict[str, tuple[float, float]]

    @property
    def t(self) -> float:
        return 1.0 - self.beta * (1.0 - self.alpha)

    def mean(self, quantity: str) -> np.ndarray:
        return self.samples[quantity].mean(axis=1)

    def stderr(self, quantity: str) -> np.ndarray:
        s = self.samples[quantity]
        if s.shape[1] < 2:
            return np.zeros(s.shape[0])
        return s.std(axis=1, ddof=1) / math.sqrt(s.shape[1])

    def to_csv(self) -> str:
        lines = ["n,quantity,mean,stderr"]
        for q in QUANTITIES:
            for n, mu, se in zip(self.grid, self.mean(q).tolist(), self.stderr(q).tolist()):
                lines.append(f"{n},{q},{mu!r},{se!r}")
        lines += ["", "slopes", "quantity,slope,stderr"]
        for q in QUANTITIES:
            s, se = self.slopes[q]
            lines.append(f"{q},{s!r},{se!r}")
        return "\n".join(lines) + "\n"


def loglog_slope(x, samples) -> tuple[float, float]:
    """OLS slope of ``log(sample)`` on ``log(x)`` over every trial, with its standard error."""
    x = np.asarray(x, dtype=float)
    samples = np.asarray(samples, dtype=float)
    lx = np.repeat(np.log(x), samples.shape[1])
    ly = np.log(samples.ravel())
    A = np.column_stack([lx, np.ones_like(lx)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    dof = len(ly) - 2
    if dof <= 0:
        return float(coef[0]), float("nan")
    resid = ly - A @ coef
    s2 = resid @ resid / dof
    se = math.sqrt(s2 / np.sum((lx - lx.mean()) ** 2))
    return float(coef[0]), se


def measure_scaling_trial(
    n: int,
    alpha: float,
    beta: float,
    streams: dict[str, np.random.Generator],
    sigma: Activation = RELU,
    xi_mode: str = "spike_aligned",
    kappa_draws: int = 64,
) -> dict[str, float]:
    """One draw of every scaling quantity at ``n = m = k``.

    ``max_a`` averages ``max_i |a_i|`` over ``kappa_draws`` draws of ``kappa``
    and over both components.
    """
    theta = float(n) ** (beta * (1.0 - alpha))
    eta = float(n) ** (beta * alpha)
    spec = build_spiked_mixture(n, [0.5, 0.5], [[theta], [theta]], streams["spikes"])
    summary = mixture_covariance(spec)
    target = TargetSpec(build_xi(spec, xi_mode, 1.0, streams["xi"]), "single_index", RELU)
    init = init_network(n, n, summary.trace, streams["init"])
    batch = sample_batch(spec, n, streams["grad_batch"])
    y = label(target, batch.X, batch.comp)
    G, F_hat = gradient_step(init, batch.X, y, eta, sigma)
    dec = spike_bulk_decompose(G, init.w, batch.X, y, sigma)
    F_perp = bulk_operator(init.F, eta, dec.delta)
    b2 = n / summary.trace

    max_a, off, diag = [], [], []
    for comp in spec.components:
        Gamma = _structure_basis(comp.cov, dec.v)
        Z = streams["test_batch"].standard_normal((kappa_draws, n))
        structure = Z - project_out(Gamma, Z)  # rows Gamma kappa
        A = comp.cov.sqrt_apply(structure) @ F_hat.T
        max_a.append(np.abs(A).max(axis=1).mean())
        F_tilde = project_out(Gamma, F_perp)
        gram = F_tilde @ F_tilde.T
        d = np.diag(gram).copy()
        np.fill_diagonal(gram, 0.0)
        off.append(np.abs(gram).max())
        diag.append(np.abs(d - b2).max())
    return {
        "norm_delta": dec.norm_delta,
        "norm_v": dec.norm_v,
        "norm_u": dec.norm_u,
        "max_a": float(np.mean(max_a)),
        "max_offdiag_ff": float(max(off)),
        "max_diag_ff": float(max(diag)),
    }


def scaling_diagnostic(
    grid,
    alpha: float,
    beta: float,
    trials: int,
    seed: int = 0,
    sigma: Activation = RELU,
    xi_mode: str = "spike_aligned",
    kappa_draws: int = 64,
) -> ScalingReport:
    """Measure every quantity on a geometric grid of sizes and fit log-log slopes."""
    grid = [int(n) for n in grid]
    if len(grid) < 3:
        raise ValueError("scaling grid needs at least three sizes")
    ratios = np.diff(np.log(grid))
    if np.any(ratios <= 0) or np.ptp(ratios) > 1e-6 * ratios.mean():
        raise ValueError("scaling grid must be increasing and geometric")
    if trials < 1:
        raise ValueError("trials must be positive")
    samples = {q: np.empty((len(grid), trials)) for q in QUANTITIES}
    for i, n in enumerate(grid):
        for t in range(trials):
            streams = spawn_streams(trial_seed(seed, t) ^ (n << 32))
            row = measure_scaling_trial(n, alpha, beta, streams, sigma, xi_mode, kappa_draws)
            for q in QUANTITIES:
                samples[q][i, t] = row[q]
    slopes = {q: loglog_slope(grid, samples[q]) for q in QUANTITIES}
    return ScalingReport(grid, alpha, beta, samples, slopes)


@dataclass(frozen=True)
class MomentComparison:
    mean_gap: float  # ||nu_sigma - nu_hat|| / ||nu_sigma||
    diag_gap: float  # same for the diagonal of the conditional second moment
    moments_sigma: ConditionalMoments
    moments_hermite: ConditionalMoments
    kappa: np.ndarray
    component: int


def moment_equivalence(
    n: int,
    k: int,
    alpha: float,
    beta: float,
    l: int,
    n_mc: int,
    seed: int = 0,
    sigma: Activation = RELU,
    component: int = 1,
    xi_mode: str = "spike_aligned",
) -> MomentComparison:
    """Compare conditional moments of ``sigma`` and its degree-``l`` equivalent.

    Builds one trained first layer at ``n = m``, draws ``kappa`` once for the
    chosen component and holds it fixed. Both activations see the same
    ``z_perp`` draws; the Hermite noise has its own stream.
    """
    from .hermite import build_equivalent_activation

    streams = spawn_streams(trial_seed(seed, 0))
    theta = float(n) ** (beta * (1.0 - alpha))
    eta = float(n) ** (beta * alpha)
    spec = build_spiked_mixture(n, [0.5, 0.5], [[theta], [theta]], streams["spikes"])
    summary = mixture_covariance(spec)
    target = TargetSpec(build_xi(spec, xi_mode, 1.0, streams["xi"]), "single_index", RELU)
    init = init_network(n, k, summary.trace, streams["init"])
    batch = sample_batch(spec, n, streams["grad_batch"])
    y = label(target, batch.X, batch.comp)
    G, F_hat = gradient_step(init, batch.X, y, eta, sigma)
    dec = spike_bulk_decompose(G, init.w, batch.X, y, sigma)
    cov = spec.components[component - 1].cov
    split = structure_bulk_split(F_hat, bulk_operator(init.F, eta, dec.delta), cov, dec.v,
                                 streams["test_batch"].standard_normal(n))
    hat = build_equivalent_activation(sigma, math.sqrt(n / summary.trace), l)
    mc_seed = int(streams["ridge_batch"].integers(2**63))
    m_sigma = conditional_moments_mc(split, sigma, n_mc, np.random.default_rng(mc_seed))
    m_hat = conditional_moments_mc(split, hat, n_mc, np.random.default_rng(mc_seed), streams["noise_test"])
    mean_gap = float(np.linalg.norm(m_sigma.nu - m_hat.nu) / np.linalg.norm(m_sigma.nu))
    d_s, d_h = m_sigma.second_moment_diag, m_hat.second_moment_diag
    diag_gap = float(np.linalg.norm(d_s - d_h) / np.linalg.norm(d_s))
    return MomentComparison(mean_gap, diag_gap, m_sigma, m_hat, split.kappa, component)
