"""Exact Gaussian-process regression.

Serves as the ground-truth reference for every approximation in the package:
negative log marginal likelihood with analytic gradients, CG fitting, and
closed-form prediction.  All solves go through Cholesky factors; explicit
matrix inverses appear only inside the O(n^3) gradient trace terms where the
full inverse is genuinely required.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .data import Dataset
from .exceptions import DimensionError
from .kernel import Hyperparameters, chol_with_jitter, kernel_matrix
from .optimize import OptTrace, guarded_objective, minimize_deterministic

LOG_2PI = np.log(2.0 * np.pi)

# Refuse exact-GP training above this size unless the caller raises the cap.
DEFAULT_EXACT_CAP = 10_000


@dataclass(frozen=True)
class PredictiveDistribution:
    """Per-point predictive mean and variance, latent (f*) or observed (y*)."""

    mean: np.ndarray
    variance: np.ndarray
    flavor: str = "latent"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flavor not in ("latent", "observed"):
            raise ValueError(f"flavor must be 'latent' or 'observed', got {self.flavor!r}")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).ravel())
        object.__setattr__(self, "variance", np.asarray(self.variance, dtype=float).ravel())
        if self.mean.size != self.variance.size:
            raise DimensionError("mean and variance must have equal length")


@dataclass(frozen=True)
class TrainedFullGP:
    """Fitted exact GP: Cholesky factor of K + sn2*I, alpha = (K + sn2*I)^-1 y,
    the NLML at the fitted hyperparameters, and the optimizer trace."""

    dataset: Dataset
    hp: Hyperparameters
    chol: np.ndarray
    alpha: np.ndarray
    nlml: float
    jitter: float = 0.0
    trace: Optional[OptTrace] = None


def _gram(data: Dataset, hp: Hyperparameters):
    """K(X, X) + sn2*I and its (possibly jittered) Cholesky factor."""
    K = kernel_matrix(data.X, data.X, hp).values
    A = K + hp.noise_var * np.eye(data.n)
    L, jitter = chol_with_jitter(A, hp.signal_var)
    return K, L, jitter


def nlml(data: Dataset, hp: Hyperparameters, exact_cap=DEFAULT_EXACT_CAP):
    """Negative log marginal likelihood and its gradient with respect to the
    packed log-parameters [log l_1..log l_d, log sf2, log sn2]."""
    if hp.d != data.d:
        raise DimensionError(f"hyperparameters have d={hp.d}, data has d={data.d}")
    if data.n > exact_cap:
        raise DimensionError(
            f"exact GP refused for n={data.n} > cap {exact_cap}; raise exact_cap to force"
        )
    K, L, _ = _gram(data, hp)
    alpha = cho_solve((L, True), data.y)
    value = 0.5 * (data.n * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L)))
                   + float(data.y @ alpha))

    # dNLML/dtheta = 0.5 * tr((A^-1 - alpha alpha^T) dA/dtheta)
    Ainv = cho_solve((L, True), np.eye(data.n))
    H = Ainv - np.outer(alpha, alpha)
    grad = np.empty(hp.d + 2)
    ls = hp.lengthscales
    for i in range(hp.d):
        diff = (data.X[:, i, None] - data.X[None, :, i]) / ls[i]
        grad[i] = 0.5 * np.sum(H * (K * diff * diff))
    grad[hp.d] = 0.5 * np.sum(H * K)
    grad[hp.d + 1] = 0.5 * hp.noise_var * np.trace(H)
    return value, grad


def fit(data: Dataset, hp0: Hyperparameters, max_iters=100, grad_tol=1e-6,
        rel_f_tol=1e-9, exact_cap=DEFAULT_EXACT_CAP) -> TrainedFullGP:
    """Fit hyperparameters by minimizing the NLML with the deterministic
    optimizer, then cache the factors used for prediction."""

    @guarded_objective
    def objective(v):
        return nlml(data, Hyperparameters.from_vector(v), exact_cap=exact_cap)

    x_opt, trace = minimize_deterministic(
        objective, hp0.to_vector(), max_iters=max_iters,
        grad_tol=grad_tol, rel_f_tol=rel_f_tol,
    )
    hp = Hyperparameters.from_vector(x_opt)
    _, L, jitter = _gram(data, hp)
    alpha = cho_solve((L, True), data.y)
    value = 0.5 * (data.n * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L)))
                   + float(data.y @ alpha))
    return TrainedFullGP(dataset=data, hp=hp, chol=L, alpha=alpha,
                         nlml=value, jitter=jitter, trace=trace)


def build(data: Dataset, hp: Hyperparameters) -> TrainedFullGP:
    """Cache prediction factors at fixed hyperparameters (no optimization)."""
    _, L, jitter = _gram(data, hp)
    alpha = cho_solve((L, True), data.y)
    value = 0.5 * (data.n * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L)))
                   + float(data.y @ alpha))
    return TrainedFullGP(dataset=data, hp=hp, chol=L, alpha=alpha,
                         nlml=value, jitter=jitter, trace=None)


def predict(model: TrainedFullGP, Xstar, flavor="latent") -> PredictiveDistribution:
    """Posterior mean and variance at the test inputs.

    Negative latent variances from round-off are clamped to zero and counted
    in the diagnostics.
    """
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.dataset.d:
        raise DimensionError(
            f"test inputs have d={Xstar.shape[1]}, model has d={model.dataset.d}"
        )
    hp = model.hp
    Kstar = kernel_matrix(Xstar, model.dataset.X, hp).values  # n* x n
    mean = Kstar @ model.alpha
    V = solve_triangular(model.chol, Kstar.T, lower=True)  # n x n*
    var = hp.signal_var - np.sum(V * V, axis=0)
    clamped = int(np.sum(var < 0))
    var = np.maximum(var, 0.0)
    diagnostics = {"negative_variance_clamps": clamped}
    if flavor == "observed":
        var = var + hp.noise_var
    return PredictiveDistribution(mean, var, flavor=flavor, diagnostics=diagnostics)
