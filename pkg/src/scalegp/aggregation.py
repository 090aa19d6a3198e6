"""Data partitioning, local GP experts, and product-style aggregation.

Experts are exact GPs trained on disjoint subsets, either with one shared
hyperparameter vector (gradients summed across experts) or independently.
Aggregation always combines the experts' *latent* predictive distributions;
the noise variance is added afterwards.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import full
from .data import Dataset
from .exceptions import DimensionError, NumericalError
from .kernel import Hyperparameters
from .optimize import OptTrace, guarded_objective, minimize_deterministic

BETA_RULES = ("constant_one", "uniform_1_over_M", "differential_entropy",
              "normalized_entropy")
AGG_METHODS = ("poe", "gpoe", "bcm", "rbcm")

# Aggregated precisions below this are floored and counted in diagnostics.
PRECISION_FLOOR = 1e-12


@dataclass(frozen=True)
class Partition:
    """Assignment of training rows to M experts, with cluster centroids."""

    assignments: np.ndarray  # (n,) ints in [0, M)
    centroids: np.ndarray    # (M, d)
    M: int

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=int)
        c = np.atleast_2d(np.asarray(self.centroids, dtype=float))
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "centroids", c)
        if c.shape[0] != self.M:
            raise DimensionError(f"{self.M} experts but {c.shape[0]} centroids")
        counts = np.bincount(a, minlength=self.M)
        if a.size and (a.min() < 0 or a.max() >= self.M):
            raise DimensionError("assignment index out of range")
        if np.any(counts == 0):
            raise DimensionError("every expert needs at least one point")

    def indices(self, k) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def block_of(self, x) -> int:
        """Nearest-centroid block for a single (normalized-space) input."""
        d2 = np.sum((self.centroids - np.asarray(x, dtype=float)) ** 2, axis=1)
        return int(np.argmin(d2))


def partition_kmeans(X, M, seed=0, max_sweeps=100) -> Partition:
    """Lloyd's k-means on the rows of X, deterministic for a given seed.

    Runs to an assignment fixpoint or ``max_sweeps`` sweeps.  Empty clusters
    are repaired by stealing the farthest point from the largest cluster.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if M > n:
        raise DimensionError(f"cannot build {M} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = X[rng.choice(n, size=M, replace=False)].copy()
    assignments = None
    for _sweep in range(max_sweeps):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for k in range(M):
            if not np.any(new_assign == k):
                donor = np.argmax(np.bincount(new_assign, minlength=M))
                members = np.flatnonzero(new_assign == donor)
                far = members[np.argmax(d2[members, donor])]
                new_assign[far] = k
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for k in range(M):
            centroids[k] = X[assignments == k].mean(axis=0)
    return Partition(assignments=assignments, centroids=centroids, M=M)


def partition_random(X, M, seed=0) -> Partition:
    """Random balanced assignment; expert sizes differ by at most one."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if M > n:
        raise DimensionError(f"cannot build {M} experts from {n} points")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignments = np.empty(n, dtype=int)
    # cycle expert ids over the shuffled rows -> sizes differ by <= 1
    assignments[order] = np.arange(n) % M
    centroids = np.vstack([X[assignments == k].mean(axis=0) for k in range(M)])
    return Partition(assignments=assignments, centroids=centroids, M=M)


@dataclass
class ExpertEnsemble:
    """M local exact-GP experts over a partition.

    ``mode`` is ``shared_hp`` (one hyperparameter vector, joint objective) or
    ``individual_hp`` (independent fits).  ``excluded`` lists experts dropped
    after factorization failure (individual mode only).
    """

    experts: list            # full.TrainedFullGP or None for excluded
    partition: Partition
    mode: str
    hp_shared: Optional[Hyperparameters]
    excluded: list = field(default_factory=list)
    trace: Optional[OptTrace] = None

    @property
    def M(self) -> int:
        return self.partition.M

    def prior_var(self, k) -> float:
        hp = self.hp_shared if self.mode == "shared_hp" else self.experts[k].hp
        return hp.signal_var

    def noise_var(self) -> float:
        if self.mode == "shared_hp":
            return self.hp_shared.noise_var
        vals = [e.hp.noise_var for e in self.experts if e is not None]
        return float(np.mean(vals))


def fit_experts(data: Dataset, partition: Partition, mode, hp0: Hyperparameters,
                max_iters=100, grad_tol=1e-6) -> ExpertEnsemble:
    """Train the local experts.

    Shared mode maximizes the sum of per-expert log marginal likelihoods with
    a single hyperparameter vector and aborts on factorization failure;
    individual mode fits each expert independently and excludes (with a
    warning) any expert whose kernel matrix cannot be factorized.
    """
    if mode not in ("shared_hp", "individual_hp"):
        raise ValueError(f"mode must be 'shared_hp' or 'individual_hp', got {mode!r}")
    subsets = [Dataset(data.X[partition.indices(k)], data.y[partition.indices(k)])
               for k in range(partition.M)]

    if mode == "shared_hp":
        @guarded_objective
        def objective(v):
            hp = Hyperparameters.from_vector(v)
            total, grad = 0.0, np.zeros(v.size)
            for sub in subsets:
                val, g = full.nlml(sub, hp)
                total += val
                grad += g
            return total, grad

        x_opt, trace = minimize_deterministic(objective, hp0.to_vector(),
                                              max_iters=max_iters, grad_tol=grad_tol)
        hp = Hyperparameters.from_vector(x_opt)
        experts = [full.build(sub, hp) for sub in subsets]
        return ExpertEnsemble(experts=experts, partition=partition, mode=mode,
                              hp_shared=hp, trace=trace)

    experts, excluded = [], []
    for k, sub in enumerate(subsets):
        try:
            experts.append(full.fit(sub, hp0, max_iters=max_iters, grad_tol=grad_tol))
        except NumericalError as exc:
            warnings.warn(f"expert {k} excluded after factorization failure: {exc}")
            experts.append(None)
            excluded.append(k)
    if all(e is None for e in experts):
        raise NumericalError("all experts failed to factorize")
    return ExpertEnsemble(experts=experts, partition=partition, mode=mode,
                          hp_shared=None, excluded=excluded)


def beta_weights(rule, variances, prior_var, M) -> np.ndarray:
    """Per-expert weights for one test point.

    ``differential_entropy`` is 0.5*(log prior_var - log variance_i);
    ``normalized_entropy`` rescales those weights to sum to one (uniform when
    they sum to zero).
    """
    variances = np.asarray(variances, dtype=float)
    if rule == "constant_one":
        return np.ones(variances.size)
    if rule == "uniform_1_over_M":
        return np.full(variances.size, 1.0 / M)
    raw = 0.5 * (np.log(prior_var) - np.log(variances))
    if rule == "differential_entropy":
        return raw
    if rule == "normalized_entropy":
        total = raw.sum()
        if abs(total) < 1e-300:
            return np.full(variances.size, 1.0 / variances.size)
        return raw / total
    raise ValueError(f"unknown beta rule {rule!r} (choose from {BETA_RULES})")


def aggregate_distributions(dists, method, beta_rule, prior_var, noise_var,
                            flavor="latent") -> full.PredictiveDistribution:
    """`aggregate` for a list of latent PredictiveDistribution objects."""
    if any(d.flavor != "latent" for d in dists):
        raise ValueError("aggregation operates on latent distributions")
    return aggregate(np.vstack([d.mean for d in dists]),
                     np.vstack([d.variance for d in dists]),
                     method, beta_rule, prior_var, noise_var, flavor=flavor)


def aggregate(expert_means, expert_vars, method, beta_rule, prior_var, noise_var,
              flavor="latent") -> full.PredictiveDistribution:
    """Combine per-expert latent distributions at a batch of test points.

    ``expert_means``/``expert_vars`` have shape (M, n*).  PoE/GPoE use the
    weighted product of Gaussians; BCM/RBCM add the prior-correction term
    (1 - sum beta) / prior_var to the aggregated precision.  The noise
    variance is added afterwards when ``flavor='observed'``.
    """
    mu = np.atleast_2d(np.asarray(expert_means, dtype=float))
    var = np.atleast_2d(np.asarray(expert_vars, dtype=float))
    if mu.shape != var.shape:
        raise DimensionError("expert means and variances must have equal shape")
    if np.any(var <= 0):
        raise ValueError("expert variances must be strictly positive")
    method = method.lower()
    if method not in AGG_METHODS:
        raise ValueError(f"unknown aggregation method {method!r}")
    M, n_star = mu.shape
    prior = np.asarray(prior_var, dtype=float)
    if method in ("bcm", "rbcm") and prior.ndim > 0 and np.ptp(prior) > 1e-12:
        raise ValueError(f"{method} requires a shared prior across experts")
    prior_scalar = float(prior.ravel()[0]) if prior.ndim > 0 else float(prior)

    betas = np.empty((M, n_star))
    prior_per_expert = np.broadcast_to(np.atleast_1d(prior).astype(float), (M,))
    for j in range(n_star):
        betas[:, j] = beta_weights(beta_rule, var[:, j], prior_per_expert, M)

    negative_beta = int(np.sum(betas < 0))
    prec = np.sum(betas / var, axis=0)
    if method in ("bcm", "rbcm"):
        prec = prec + (1.0 - betas.sum(axis=0)) / prior_scalar
    floored = int(np.sum(prec < PRECISION_FLOOR))
    prec = np.maximum(prec, PRECISION_FLOOR)
    agg_var = 1.0 / prec
    agg_mean = agg_var * np.sum(betas * mu / var, axis=0)
    diagnostics = {"negative_beta_count": negative_beta,
                   "variance_floor_hits": floored}
    if flavor == "observed":
        agg_var = agg_var + noise_var
    return full.PredictiveDistribution(agg_mean, agg_var, flavor=flavor,
                                       diagnostics=diagnostics)


DEFAULT_BETA = {"poe": "constant_one", "gpoe": "uniform_1_over_M",
                "bcm": "constant_one", "rbcm": "differential_entropy"}


def predict_aggregated(ensemble: ExpertEnsemble, Xstar, method, beta_rule=None,
                       flavor="latent") -> full.PredictiveDistribution:
    """Query every surviving expert at every test point, then aggregate."""
    method = method.lower()
    if beta_rule is None:
        beta_rule = DEFAULT_BETA[method]
    if method in ("bcm", "rbcm") and ensemble.mode != "shared_hp":
        raise ValueError(f"{method} needs experts with a shared prior; "
                         "fit the ensemble in shared_hp mode")
    live = [k for k, e in enumerate(ensemble.experts) if e is not None]
    if not live:
        raise NumericalError("no experts available for aggregation")
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    means, variances = [], []
    for k in live:
        pred = full.predict(ensemble.experts[k], Xstar, flavor="latent")
        means.append(pred.mean)
        # exact zeros would break the precision sums; keep them tiny instead
        variances.append(np.maximum(pred.variance, 1e-300))
    prior = (ensemble.prior_var(live[0]) if ensemble.mode == "shared_hp"
             else np.array([ensemble.prior_var(k) for k in live]))
    out = aggregate(np.vstack(means), np.vstack(variances), method, beta_rule,
                    prior, ensemble.noise_var(), flavor=flavor)
    out.diagnostics["excluded_experts"] = list(ensemble.excluded)
    return out


def predict_local(ensemble: ExpertEnsemble, Xstar, flavor="latent"):
    """Pure local prediction: each test point is answered only by the expert
    of its nearest partition centroid (no aggregation)."""
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    mean = np.empty(Xstar.shape[0])
    var = np.empty(Xstar.shape[0])
    blocks = np.array([ensemble.partition.block_of(x) for x in Xstar])
    for k in np.unique(blocks):
        expert = ensemble.experts[k]
        if expert is None:
            raise NumericalError(f"expert {k} was excluded; no local prediction")
        idx = np.flatnonzero(blocks == k)
        pred = full.predict(expert, Xstar[idx], flavor=flavor)
        mean[idx] = pred.mean
        var[idx] = pred.variance
    return full.PredictiveDistribution(mean, var, flavor=flavor)
