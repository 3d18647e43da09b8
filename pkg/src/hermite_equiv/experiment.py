"""Experiment configuration, single trials, sweeps and result tables.

A trial resamples everything from its own seed: spikes, target direction,
network initialisation and the three data batches (gradient step, ridge fit,
test). The network and its Hermite counterpart share the trained first layer
and all inputs; only the Hermite feature noise differs.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .activations import get_activation
from .errors import ConfigError, NumericalError
from .hermite import build_equivalent_activation
from .mixture import (
    Component,
    CovarianceSpec,
    MixtureSpec,
    TargetSpec,
    build_spiked_mixture,
    build_xi,
    label,
    mixture_covariance,
    sample_batch,
)
from .network import (
    fit_second_layer,
    gradient_step,
    init_network,
    prediction_error,
    training_error,
)
from .seeding import spawn_streams, trial_seed

AXES = ("k_over_m", "alpha", "beta", "mixture_ratio", "alignment", "rank", "lambda", "eta_override")
SWEEP_ACTIVATIONS = ("relu", "tanh", "sigmoid")
METRICS = ("T_nn", "G_nn", "T_hermite", "G_hermite", "gap")
DEFAULT_K_OVER_M = (0.25, 0.5, 1.0, 2.0, 3.0)
THREADS_ENV = "HERMITE_EQUIV_THREADS"


def window_degree(beta: float) -> int:
    """Smallest ``l`` with ``beta < (l - 1) / l``; then ``(l - 2) / (l - 1) <= beta``."""
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"no finite degree window for beta={beta}")
    return math.floor(1.0 / (1.0 - beta)) + 1


def in_window(beta: float, l: int) -> bool:
    lo = (l - 2) / (l - 1) if l > 1 else -math.inf
    return lo < beta < (l - 1) / l


@dataclass(frozen=True)
class MixtureDescriptor:
    components: int = 2
    weights: tuple[float, ...] = (0.5, 0.5)
    ranks: tuple[int, ...] = (1, 1)
    alignment: float = 0.0
    theta_mode: str = "fixed"  # "fixed": n^{beta(1-alpha)}; "uniform": U(0, n^beta)
    mean_norm: float = 0.0  # +-mean_norm along a random unit direction; needs two components


@dataclass(frozen=True)
class TargetDescriptor:
    kind: str = "single_index"
    link: str = "relu"
    xi_mode: str = "random"
    scale: float = 1.0  # ||xi|| = scale / ||Sigma^{1/2}||


@dataclass(frozen=True)
class ExperimentConfig:
    n: int = 500
    m: int = 500
    k: int = 500
    alpha: float = 0.5
    beta: float = 0.74
    lam: float = 1e-4
    l_degree: int = 5
    activation: str = "relu"
    target: TargetDescriptor = TargetDescriptor()
    mixture: MixtureDescriptor = MixtureDescriptor()
    n_test: Optional[int] = None  # defaults to 4 m
    trials: int = 20
    base_seed: int = 0
    generator: str = "PCG64"
    eta_override: Optional[float] = None
    hermite_b: Optional[float] = None  # defaults to sqrt(n / Tr Sigma)
    match_degree: bool = False  # pick l from the beta window
    record_diagnostics: bool = False

    def __post_init__(self):
        for name in ("n", "m", "k", "l_degree", "trials"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_test is not None and self.n_test < 1:
            raise ConfigError("n_test must be positive")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if not 0 <= self.base_seed < 2**64:
            raise ConfigError("base_seed must be a 64-bit unsigned integer")
        if self.eta_override is not None and self.eta_override <= 0:
            raise ConfigError("eta_override must be positive")
        if self.hermite_b is not None and self.hermite_b <= 0:
            raise ConfigError("hermite_b must be positive")
        if self.match_degree and self.beta >= 1.0:
            raise ConfigError("match_degree needs beta < 1")
        try:
            get_activation(self.activation)
            get_activation(self.target.link)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not hasattr(np.random, self.generator):
            raise ConfigError(f"unknown bit generator {self.generator!r}")
        mix = self.mixture
        if mix.components < 1 or len(mix.weights) != mix.components or len(mix.ranks) != mix.components:
            raise ConfigError("mixture weights and ranks need one entry per component")
        if abs(sum(mix.weights) - 1.0) > 1e-12 or min(mix.weights) <= 0:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if min(mix.ranks) < 0 or sum(mix.ranks) > self.n:
            raise ConfigError("spike ranks must be nonnegative and fit in n dimensions")
        if mix.theta_mode not in ("fixed", "uniform"):
            raise ConfigError(f"unknown theta_mode {mix.theta_mode!r}")
        if len(set(mix.ranks)) > 1 and mix.mean_norm == 0:
            raise ConfigError("equal component traces need equal spike ranks")
        if not 0.0 <= mix.alignment <= 1.0:
            raise ConfigError("alignment must lie in [0, 1]")
        if mix.mean_norm < 0 or (mix.mean_norm > 0 and mix.components != 2):
            raise ConfigError("mean_norm must be nonnegative and needs two components")
        tgt = self.target
        if tgt.kind not in ("single_index", "class_sign"):
            raise ConfigError(f"unknown target kind {tgt.kind!r}")
        if tgt.kind == "class_sign" and mix.components != 2:
            raise ConfigError("class_sign labels need exactly two components")
        if tgt.xi_mode not in ("random", "spike_aligned"):
            raise ConfigError(f"unknown xi_mode {tgt.xi_mode!r}")
        if tgt.scale <= 0:
            raise ConfigError("target scale must be positive")

    @property
    def test_size(self) -> int:
        return self.n_test if self.n_test is not None else 4 * self.m

    @property
    def eta(self) -> float:
        if self.eta_override is not None:
            return float(self.eta_override)
        return float(self.n) ** (self.beta * self.alpha)

    @property
    def degree(self) -> int:
        return window_degree(self.beta) if self.match_degree else self.l_degree

    def notes(self) -> list[str]:
        out = []
        if not self.match_degree and self.beta < 1 and not in_window(self.beta, self.l_degree):
            out.append(f"l={self.l_degree} outside the degree window for beta={self.beta}")
        if self.eta_override is not None:
            implied = implied_beta(self)
            if implied > 1.0:
                out.append(f"no equivalence guarantee: implied beta={implied:.3f} > 1")
        return out

    # JSON round trip ---------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["mixture"]["weights"] = list(d["mixture"]["weights"])
        d["mixture"]["ranks"] = list(d["mixture"]["ranks"])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            if "mixture" in d:
                mix = dict(d["mixture"])
                for key in ("weights", "ranks"):
                    if key in mix:
                        mix[key] = tuple(mix[key])
                if "weights" in mix and "components" not in mix:
                    mix["components"] = len(mix["weights"])
                d["mixture"] = MixtureDescriptor(**mix)
            if "target" in d:
                d["target"] = TargetDescriptor(**d["target"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def implied_beta(cfg: ExperimentConfig) -> float:
    """``log(eta * ||Sigma||) / log(n)`` with the spike strength the config implies."""
    theta = float(cfg.n) ** (cfg.beta * (1.0 - cfg.alpha))
    return math.log(cfg.eta * (1.0 + theta / max(cfg.mixture.components, 1))) / math.log(cfg.n)


def build_mixture(cfg: ExperimentConfig, rng: np.random.Generator) -> MixtureSpec:
    mix = cfg.mixture
    if mix.theta_mode == "fixed":
        theta = float(cfg.n) ** (cfg.beta * (1.0 - cfg.alpha))
        thetas = [[theta] * d for d in mix.ranks]
    else:
        # one draw shared by every component keeps the traces equal
        shared = rng.uniform(0.0, float(cfg.n) ** cfg.beta, size=max(mix.ranks))
        shared = np.where(shared > 0, shared, np.finfo(float).tiny)
        thetas = [list(shared[:d]) for d in mix.ranks]
    try:
        spec = build_spiked_mixture(cfg.n, mix.weights, thetas, rng, mix.alignment)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if mix.mean_norm > 0:
        e = rng.standard_normal(cfg.n)
        e /= np.linalg.norm(e)
        comps = tuple(Component(c.weight, c.cov, sign * mix.mean_norm * e)
                      for c, sign in zip(spec.components, (1.0, -1.0)))
        spec = MixtureSpec(comps, nonzero_means=True)
    return spec


@dataclass
class TrialResult:
    trial_index: int
    seed: int
    T_nn: float = math.nan
    G_nn: float = math.nan
    T_hermite: float = math.nan
    G_hermite: float = math.nan
    T_zero: float = math.nan  # (1/2m) sum y^2 on the ridge batch
    diagnostics: Optional[dict[str, float]] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def gap(self) -> float:
        return abs(self.G_nn - self.G_hermite) / self.G_nn

    def metric(self, name: str) -> float:
        return self.gap if name == "gap" else getattr(self, name)


def run_trial(cfg: ExperimentConfig, trial_index: int) -> TrialResult:
    """One two-stage training run for the network and its Hermite counterpart.

    Errors are caught and stored on the result so callers can report them.
    """
    seed = trial_seed(cfg.base_seed, trial_index)
    result = TrialResult(trial_index, seed)
    try:
        _run_trial(cfg, result)
    except (NumericalError, ConfigError, ValueError, np.linalg.LinAlgError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def _run_trial(cfg: ExperimentConfig, result: TrialResult) -> None:
    s = spawn_streams(result.seed, generator=cfg.generator)
    spec = build_mixture(cfg, s["spikes"])
    summary = mixture_covariance(spec)
    sigma = get_activation(cfg.activation)
    tgt = cfg.target
    xi = build_xi(spec, tgt.xi_mode, tgt.scale, s["xi"]) if tgt.kind == "single_index" else np.zeros(cfg.n)
    target = TargetSpec(xi, tgt.kind, get_activation(tgt.link) if tgt.kind == "single_index" else None)
    init = init_network(cfg.n, cfg.k, summary.trace, s["init"])

    grad = sample_batch(spec, cfg.m, s["grad_batch"])
    y_grad = label(target, grad.X, grad.comp, len(spec))
    G, F_hat = gradient_step(init, grad.X, y_grad, cfg.eta, sigma)

    ridge = sample_batch(spec, cfg.m, s["ridge_batch"])
    y_ridge = label(target, ridge.X, ridge.comp, len(spec))
    test = sample_batch(spec, cfg.test_size, s["test_batch"])
    y_test = label(target, test.X, test.comp, len(spec))
    _fit_and_score(cfg, result, sigma, summary.trace, F_hat, ridge.X, y_ridge, test.X, y_test, s)

    if cfg.record_diagnostics:
        from .diagnostics import spike_bulk_decompose

        dec = spike_bulk_decompose(G, init.w, grad.X, y_grad, sigma)
        result.diagnostics = {"norm_u": dec.norm_u, "norm_v": dec.norm_v, "norm_delta": dec.norm_delta}


def _fit_and_score(cfg, result, sigma, trace_sigma, F_hat, X_r, y_r, X_t, y_t, s) -> None:
    net, Phi = fit_second_layer(F_hat, sigma, X_r, y_r, cfg.lam, cfg.eta)
    b = cfg.hermite_b if cfg.hermite_b is not None else math.sqrt(cfg.n / trace_sigma)
    hat = build_equivalent_activation(sigma, b, cfg.degree)
    net_h, Phi_h = fit_second_layer(F_hat, hat, X_r, y_r, cfg.lam, cfg.eta, s["noise_train"])
    result.T_nn = training_error(net, X_r, y_r, train_features=Phi)
    result.T_hermite = training_error(net_h, X_r, y_r, train_features=Phi_h)
    result.T_zero = float(0.5 * np.mean(np.asarray(y_r) ** 2))
    result.G_nn = prediction_error(net, X_t, y_t)
    result.G_hermite = prediction_error(net_h, X_t, y_t, s["noise_test"])
    values = (result.T_nn, result.G_nn, result.T_hermite, result.G_hermite)
    if not all(math.isfinite(v) for v in values):
        raise NumericalError("non-finite training or generalization error")


# Sweeps -------------------------------------------------------------------

@dataclass
class SweepCell:
    value: float
    activation: str
    results: list[TrialResult]
    notes: list[str] = field(default_factory=list)

    @property
    def succeeded(self) -> list[TrialResult]:
        return [r for r in self.results if r.ok]

    @property
    def failures(self) -> list[TrialResult]:
        return [r for r in self.results if not r.ok]

    def samples(self, metric: str) -> np.ndarray:
        return np.array([r.metric(metric) for r in self.succeeded])

    def summary(self, metric: str) -> tuple[float, float, int]:
        x = self.samples(metric)
        if x.size == 0:
            return math.nan, math.nan, 0
        se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
        return float(x.mean()), se, int(x.size)


@dataclass
class SweepTable:
    axis: str
    values: list[float]
    cells: list[SweepCell]
    metrics: tuple[str, ...] = METRICS

    def cell(self, value, activation: str) -> SweepCell:
        for c in self.cells:
            if c.value == value and c.activation == activation:
                return c
        raise KeyError((value, activation))

    def records(self) -> list[dict[str, Any]]:
        rows = []
        for c in self.cells:
            for metric in self.metrics:
                mean, se, count = c.summary(metric)
                rows.append({"axis": self.axis, "value": float(c.value), "activation": c.activation,
                             "metric": metric, "mean": mean, "stderr": se, "trials": count})
            if c.failures:
                rows.append({"axis": self.axis, "value": float(c.value), "activation": c.activation,
                             "metric": "failed_trials", "mean": float(len(c.failures)), "stderr": 0.0,
                             "trials": len(c.results)})
        return rows


CSV_HEADER = "axis,value,activation,metric,mean,stderr,trials"


def to_csv(table: SweepTable) -> str:
    lines = [CSV_HEADER]
    for r in table.records():
        lines.append(f"{r['axis']},{r['value']!r},{r['activation']},{r['metric']},"
                     f"{r['mean']!r},{r['stderr']!r},{r['trials']}")
    return "\n".join(lines) + "\n"


def to_json(table: SweepTable) -> str:
    doc = {
        "axis": table.axis,
        "records": table.records(),
        "notes": [{"value": float(c.value), "activation": c.activation, "notes": c.notes}
                  for c in table.cells if c.notes],
        "failures": [{"value": float(c.value), "activation": c.activation,
                      "trial_index": r.trial_index, "error": r.error}
                     for c in table.cells for r in c.failures],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def emit(table: SweepTable, fmt: str = "csv", path=None) -> str:
    """Render ``table`` as CSV or JSON and write it to ``path`` when given."""
    if fmt == "csv":
        text = to_csv(table)
    elif fmt == "json":
        text = to_json(table)
    else:
        raise ConfigError(f"unknown output format {fmt!r}")
    if path is not None:
        with io.open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Return ``cfg`` with one sweep coordinate set."""
    rep = dataclasses.replace
    if axis == "k_over_m":
        k = int(round(value * cfg.m))
        if k < 1:
            raise ConfigError(f"k/m={value} gives k < 1")
        return rep(cfg, k=k)
    if axis == "alpha":
        return rep(cfg, alpha=float(value))
    if axis == "beta":
        return rep(cfg, beta=float(value))
    if axis == "mixture_ratio":
        if cfg.mixture.components != 2:
            raise ConfigError("mixture_ratio sweeps need two components")
        return rep(cfg, mixture=rep(cfg.mixture, weights=(float(value), 1.0 - float(value))))
    if axis == "alignment":
        return rep(cfg, mixture=rep(cfg.mixture, alignment=float(value)))
    if axis == "rank":
        if int(value) != value:
            raise ConfigError("rank values must be integers")
        return rep(cfg, mixture=rep(cfg.mixture, ranks=(int(value),) * cfg.mixture.components))
    if axis == "lambda":
        return rep(cfg, lam=float(value))
    if axis == "eta_override":
        return rep(cfg, eta_override=float(value))
    raise ConfigError(f"unknown axis {axis!r}; expected one of {AXES}")


def parse_axis(name: str) -> str:
    """Accept ``KOverM``, ``k_over_m``, ``k-over-m`` and similar spellings."""
    key = name.replace("-", "").replace("_", "").lower()
    for axis in AXES:
        if axis.replace("_", "") == key:
            return axis
    raise ConfigError(f"unknown axis {name!r}; expected one of {AXES}")


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get(THREADS_ENV)
    n = requested if requested is not None else (os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {cap!r}") from exc
    return max(1, n)


def _run_job(job):
    cfg, idx = job
    with threadpool_limits(1):
        return run_trial(cfg, idx)


def run_jobs(jobs, workers: int = 1) -> list[TrialResult]:
    """Run ``(cfg, trial_index)`` jobs; results come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _check_monotone(values) -> None:
    if not values:
        raise ConfigError("sweep needs at least one value")
    d = np.diff(np.asarray(values, dtype=float))
    if not (np.all(d > 0) or np.all(d < 0)):
        raise ConfigError("sweep values must be strictly monotone")


def run_sweep(cfg: ExperimentConfig, axis: str, values, activations=SWEEP_ACTIVATIONS,
              workers: int | None = None) -> SweepTable:
    """Run ``cfg.trials`` trials per axis value and activation and aggregate them."""
    axis = parse_axis(axis)
    values = [float(v) for v in values]
    _check_monotone(values)
    cells, jobs = [], []
    for v in values:
        for act in activations:
            cell_cfg = dataclasses.replace(apply_axis(cfg, axis, v), activation=act)
            cells.append((v, act, cell_cfg))
            jobs.extend((cell_cfg, t) for t in range(cfg.trials))
    results = run_jobs(jobs, worker_count(workers))
    out = []
    for i, (v, act, cell_cfg) in enumerate(cells):
        chunk = results[i * cfg.trials:(i + 1) * cfg.trials]
        out.append(SweepCell(v, act, chunk, cell_cfg.notes()))
    return SweepTable(axis, values, out)


def run_single(cfg: ExperimentConfig, workers: int | None = None) -> SweepTable:
    """All trials of one config, as a one-cell table on the ``alpha`` axis."""
    results = run_jobs([(cfg, t) for t in range(cfg.trials)], worker_count(workers))
    return SweepTable("alpha", [cfg.alpha], [SweepCell(cfg.alpha, cfg.activation, results, cfg.notes())])


# External data ----------------------------------------------------------------

def _external_trial(job) -> TrialResult:
    cfg, idx, X, y, trace = job
    result = TrialResult(idx, trial_seed(cfg.base_seed, idx))
    try:
        with threadpool_limits(1):
            s = spawn_streams(result.seed, generator=cfg.generator)
            need = 2 * cfg.m + 1
            if X.shape[0] < need:
                raise ConfigError(f"external data has {X.shape[0]} rows, need at least {need}")
            perm = s["grad_batch"].permutation(X.shape[0])
            g, r, t = perm[:cfg.m], perm[cfg.m:2 * cfg.m], perm[2 * cfg.m:2 * cfg.m + cfg.test_size]
            sigma = get_activation(cfg.activation)
            init = init_network(X.shape[1], cfg.k, trace, s["init"])
            _, F_hat = gradient_step(init, X[g], y[g], cfg.eta, sigma)
            _fit_and_score(cfg, result, sigma, trace, F_hat, X[r], y[r], X[t], y[t], s)
    except (NumericalError, ConfigError, ValueError, np.linalg.LinAlgError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def run_external(cfg: ExperimentConfig, path_a, path_b, k_over_m=DEFAULT_K_OVER_M,
                 activations=SWEEP_ACTIVATIONS, workers: int | None = None, nonzero_means: bool = False):
    """Preprocess two class files and sweep ``k/m`` with Hermite scale ``b = 1``.

    Each trial draws its gradient, ridge and test rows from a fresh
    permutation of the pooled data. Returns ``(table, report)``.
    """
    from .external import load_matrix, preprocess_external

    raw_a, raw_b = load_matrix(path_a), load_matrix(path_b)
    rng = spawn_streams(cfg.base_seed, ("preprocess",), cfg.generator)["preprocess"]
    X, y, _, report = preprocess_external(raw_a, raw_b, rng, nonzero_means)
    if X.shape[1] != cfg.n:
        warnings.warn(f"config n={cfg.n} replaced by the data dimension {X.shape[1]}", stacklevel=2)
    trace = float(np.mean(np.sum(X * X, axis=1)))
    base = dataclasses.replace(cfg, n=X.shape[1], hermite_b=cfg.hermite_b or 1.0)
    values = [float(v) for v in k_over_m]
    _check_monotone(values)
    cells, jobs = [], []
    for v in values:
        for act in activations:
            cell_cfg = dataclasses.replace(apply_axis(base, "k_over_m", v), activation=act)
            cells.append((v, act, cell_cfg))
            jobs.extend((cell_cfg, t, X, y, trace) for t in range(cfg.trials))
    workers = worker_count(workers)
    if workers <= 1:
        results = [_external_trial(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_external_trial, jobs))
    out = [SweepCell(v, act, results[i * cfg.trials:(i + 1) * cfg.trials], c.notes())
           for i, (v, act, c) in enumerate(cells)]
    return SweepTable("k_over_m", values, out), report
