"""Stochastic variational GP: explicit variational parameters, an unbiased
minibatch estimate of the uncollapsed bound, Adadelta-style training, and
prediction through the variational distribution.

The bound is

    F_q = sum_i < log N(y_i | f_i, sn2) >_{q(f_i)}  -  KL(q(f_m) || p(f_m)),
    q(f_m) = N(var_mean, S),   S = cov_factor cov_factor^T,

where q(f_i) marginalizes p(f_i | f_m) q(f_m).  A batch of size b estimates
the likelihood sum with weight n_total/b; the KL term enters once, unscaled.
The per-point Gaussian expectation is closed-form:

    < log N(y_i|f_i, sn2) > = -0.5 log(2 pi sn2)
        - [ (y_i - mu_i)^2 + k_ii - q_ii + a_i^T S a_i ] / (2 sn2),

with a_i the i-th row of A = K_bm K_mm^-1, mu_i = a_i^T var_mean and
q_ii the Nystrom diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .data import Dataset
from .exceptions import DimensionError
from .full import PredictiveDistribution
from .kernel import Hyperparameters, chol_with_jitter, kernel_matrix
from .optimize import OptTrace, guarded_objective, minimize_stochastic
from .sparse import InducingSet, _as_Z


@dataclass(frozen=True)
class VariationalState:
    """Variational mean and the lower-triangular factor of its covariance
    (positive diagonal, so S = cov_factor cov_factor^T stays positive
    definite under unconstrained optimization)."""

    var_mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.var_mean, dtype=float).ravel()
        Lf = np.tril(np.asarray(self.cov_factor, dtype=float))
        object.__setattr__(self, "var_mean", mu)
        object.__setattr__(self, "cov_factor", Lf)
        if Lf.shape != (mu.size, mu.size):
            raise DimensionError("cov_factor must be m x m for an m-vector mean")
        if np.any(np.diag(Lf) <= 0):
            raise ValueError("cov_factor needs a strictly positive diagonal")

    @property
    def m(self) -> int:
        return self.var_mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T


@dataclass(frozen=True)
class SvgpConfig:
    """Minibatch training configuration (Adadelta-style step rule)."""

    batch_size: int
    step_rate: float = 0.1
    momentum: float = 0.9
    decay: float = 0.9
    max_iters: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SvgpModel:
    """Fitted SVGP: inducing set, hyperparameters, variational state."""

    data: Dataset
    Z: InducingSet
    hp: Hyperparameters
    vs: VariationalState
    config: SvgpConfig
    trace: Optional[OptTrace] = None
    bound: float = np.nan


def _pieces(X_b, y_b, w, Z, hp, vs):
    """Value and per-component gradients of the bound on one batch."""
    m = Z.m
    b = X_b.shape[0]
    sf2, sn2 = hp.signal_var, hp.noise_var
    K_mm = kernel_matrix(Z.Z, Z.Z, hp).values
    L, _ = chol_with_jitter(K_mm, sf2)
    K_bm = kernel_matrix(X_b, Z.Z, hp).values
    A = cho_solve((L, True), K_bm.T).T               # b x m, K_bm K_mm^-1
    u = cho_solve((L, True), vs.var_mean)            # K_mm^-1 var_mean
    mu = K_bm @ u
    V = solve_triangular(L, K_bm.T, lower=True)      # m x b
    q = np.sum(V * V, axis=0)
    LS = vs.cov_factor
    P = A @ LS
    s = np.sum(P * P, axis=1)
    resid = y_b - mu

    e_point = (-0.5 * np.log(2 * np.pi * sn2)
               - (resid**2 + sf2 - q + s) / (2.0 * sn2))
    Ls2 = solve_triangular(L, LS, lower=True)
    tr_KinvS = float(np.sum(Ls2 * Ls2))
    quad = float(vs.var_mean @ u)
    logdet_K = 2.0 * float(np.sum(np.log(np.diag(L))))
    logdet_S = 2.0 * float(np.sum(np.log(np.diag(LS))))
    kl = 0.5 * (tr_KinvS + quad - m + logdet_K - logdet_S)
    value = w * float(np.sum(e_point)) - kl

    # ---- gradients ----
    c_vec = w * resid / sn2
    g_varmean = A.T @ c_vec - u

    Kinv = cho_solve((L, True), np.eye(m))
    Sinv_L = solve_triangular(LS, np.eye(m), lower=True)
    Sinv = Sinv_L.T @ Sinv_L
    G_S = -0.5 * w / sn2 * (A.T @ A) - 0.5 * Kinv + 0.5 * Sinv
    g_LS = 2.0 * G_S @ LS

    g_log_sn2 = w * float(np.sum(-0.5 + (resid**2 + sf2 - q + s) / (2.0 * sn2)))

    # Frobenius weights for the kernel-block derivatives
    g_half = 0.5 * w / sn2
    A_bm = np.outer(c_vec, u) + 2.0 * g_half * A
    A_mm = -np.outer(A.T @ c_vec, u) - A.T @ (g_half * A)
    SKinv = cho_solve((L, True), vs.cov).T           # S K_mm^-1
    R = A @ SKinv
    A_bm += 2.0 * (-g_half) * R
    A_mm += -2.0 * R.T @ ((-g_half) * A)
    A_mm += -0.5 * (Kinv - Kinv @ vs.cov @ Kinv - np.outer(u, u))
    A_mm = 0.5 * (A_mm + A_mm.T)
    a_kdiag = -g_half * b  # coefficient of d(sf2) from the k_ii terms

    return {
        "value": value, "kl": kl,
        "A_bm": A_bm, "A_mm": A_mm, "a_kdiag_sf2": a_kdiag,
        "g_varmean": g_varmean, "g_LS": g_LS, "g_log_sn2": g_log_sn2,
        "K_bm": K_bm, "K_mm": K_mm, "L": L,
    }


def elbo(data_batch: Dataset, n_total, Z, hp: Hyperparameters,
         vs: VariationalState) -> float:
    """Unbiased estimate of the bound from one batch: likelihood terms summed
    over the batch and rescaled by n_total / batch_size, KL added once."""
    Z = _as_Z(Z)
    if vs.m != Z.m:
        raise DimensionError(f"variational state has m={vs.m}, inducing set m={Z.m}")
    w = n_total / data_batch.n
    return _pieces(data_batch.X, data_batch.y, w, Z, hp, vs)["value"]


def optimal_variational_state(data: Dataset, Z, hp: Hyperparameters) -> VariationalState:
    """Closed-form optimum of the bound over the variational distribution:
    mean sn2^-1 K_mm Sigma K_mn y and covariance K_mm Sigma K_mm with
    Sigma = (K_mm + sn2^-1 K_mn K_nm)^-1."""
    Z = _as_Z(Z)
    sn2 = hp.noise_var
    K_mm = kernel_matrix(Z.Z, Z.Z, hp).values
    L, _ = chol_with_jitter(K_mm, hp.signal_var)
    K_nm = kernel_matrix(data.X, Z.Z, hp).values
    V = solve_triangular(L, K_nm.T, lower=True).T    # n x m
    B = np.eye(Z.m) + (V.T @ V) / sn2
    L_B, _ = chol_with_jitter(B, 1.0)
    # S = L B^-1 L^T ; var_mean = sn2^-1 L B^-1 V^T y
    rhs = cho_solve((L_B, True), np.column_stack([V.T @ data.y / sn2, L.T]))
    var_mean = L @ rhs[:, 0]
    S = L @ rhs[:, 1:]
    S = 0.5 * (S + S.T)
    cov_factor, _ = chol_with_jitter(S, max(np.max(np.diag(S)), 1e-300))
    return VariationalState(var_mean=var_mean, cov_factor=cov_factor)


# ---- parameter packing -----------------------------------------------------

def _pack(hp, Z, vs, train_z):
    parts = [hp.to_vector()]
    if train_z:
        parts.append(Z.Z.ravel())
    tril = np.tril_indices(vs.m)
    lvals = vs.cov_factor[tril].copy()
    diag_pos = np.flatnonzero(tril[0] == tril[1])
    lvals[diag_pos] = np.log(lvals[diag_pos])
    parts.extend([vs.var_mean, lvals])
    return np.concatenate(parts)


def _unpack(v, d, m, Z0, train_z):
    hp = Hyperparameters.from_vector(v[:d + 2])
    k = d + 2
    if train_z:
        Z = InducingSet(v[k:k + m * d].reshape(m, d), trainable=True)
        k += m * d
    else:
        Z = Z0
    var_mean = v[k:k + m]
    k += m
    tril = np.tril_indices(m)
    lvals = v[k:].copy()
    diag_pos = np.flatnonzero(tril[0] == tril[1])
    lvals[diag_pos] = np.exp(lvals[diag_pos])
    LS = np.zeros((m, m))
    LS[tril] = lvals
    return hp, Z, VariationalState(var_mean=var_mean, cov_factor=LS)


def _full_gradient(pieces, X_b, Z, hp, vs, train_z):
    """Assemble the packed gradient from the per-component pieces."""
    d, m = Z.Z.shape[1], Z.m
    ls = hp.lengthscales
    sf2, sn2 = hp.signal_var, hp.noise_var
    A_bm, A_mm = pieces["A_bm"], pieces["A_mm"]
    K_bm, K_mm = pieces["K_bm"], pieces["K_mm"]

    g_hp = np.empty(d + 2)
    for i in range(d):
        diff_bm = (X_b[:, i, None] - Z.Z[None, :, i]) / ls[i]
        diff_mm = (Z.Z[:, i, None] - Z.Z[None, :, i]) / ls[i]
        g_hp[i] = float(np.sum(A_bm * K_bm * diff_bm * diff_bm)) \
            + float(np.sum(A_mm * K_mm * diff_mm * diff_mm))
    g_hp[d] = float(np.sum(A_bm * K_bm)) + float(np.sum(A_mm * K_mm)) \
        + pieces["a_kdiag_sf2"] * sf2
    g_hp[d + 1] = pieces["g_log_sn2"]

    parts = [g_hp]
    if train_z:
        P = A_bm * K_bm
        P2 = A_mm * K_mm
        gZ = (P.T @ X_b - P.sum(axis=0)[:, None] * Z.Z)
        gZ += 2.0 * (P2.T @ Z.Z - P2.sum(axis=0)[:, None] * Z.Z)
        parts.append((gZ / ls[None, :] ** 2).ravel())

    tril = np.tril_indices(m)
    g_LS = pieces["g_LS"].copy()
    g_LS[np.diag_indices(m)] *= np.diag(vs.cov_factor)  # chain rule for log-diag
    parts.extend([pieces["g_varmean"], g_LS[tril]])
    return np.concatenate(parts)


def elbo_objective(data: Dataset, Z0, train_z=True):
    """Packed objective for the *negative* bound: callable(v, batch_idx) ->
    (-elbo, -grad), suitable for the stochastic optimizer and gradient checks
    (``batch_idx=None`` means the full dataset)."""
    Z0 = _as_Z(Z0)
    d, m = data.d, Z0.m

    def objective(v, batch=None):
        hp, Z, vs = _unpack(v, d, m, Z0, train_z)
        idx = np.arange(data.n) if batch is None else batch
        w = data.n / idx.size
        pieces = _pieces(data.X[idx], data.y[idx], w, Z, hp, vs)
        grad = _full_gradient(pieces, data.X[idx], Z, hp, vs, train_z)
        return -pieces["value"], -grad

    return objective


def fit_svgp(data: Dataset, Z0, hp0: Hyperparameters, config: SvgpConfig,
             vs0: Optional[VariationalState] = None) -> SvgpModel:
    """Minibatch stochastic ascent on hyperparameters, inducing locations
    (when trainable) and the variational state.

    The variational state is warm-started at its closed-form optimum for the
    initial hyperparameters unless ``vs0`` is given.  Per-iteration cost is
    O(b m^2 + m^3).
    """
    Z0 = _as_Z(Z0)
    if Z0.m < 1:
        raise DimensionError("SVGP needs at least one inducing point")
    if config.batch_size > data.n:
        raise ValueError(f"batch_size {config.batch_size} exceeds n={data.n}")
    if vs0 is None:
        vs0 = optimal_variational_state(data, Z0, hp0)
    train_z = Z0.trainable
    objective = guarded_objective(elbo_objective(data, Z0, train_z=train_z))
    x0 = _pack(hp0, Z0, vs0, train_z)
    x_opt, trace = minimize_stochastic(objective, x0, config, n_items=data.n)
    hp, Z, vs = _unpack(x_opt, data.d, Z0.m, Z0, train_z)
    bound = elbo(data, data.n, Z, hp, vs)
    return SvgpModel(data=data, Z=Z, hp=hp, vs=vs, config=config,
                     trace=trace, bound=bound)


def svgp_predict(model_or_parts, Xstar, flavor="latent") -> PredictiveDistribution:
    """Prediction through the variational distribution:
    mean k_*m K_mm^-1 var_mean and latent variance
    k_** - Q_** + k_*m K_mm^-1 S K_mm^-1 k_m*."""
    if isinstance(model_or_parts, SvgpModel):
        Z, hp, vs = model_or_parts.Z, model_or_parts.hp, model_or_parts.vs
    else:
        Z, hp, vs = model_or_parts
        Z = _as_Z(Z)
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != Z.Z.shape[1]:
        raise DimensionError("test inputs and inducing points disagree on d")
    K_mm = kernel_matrix(Z.Z, Z.Z, hp).values
    L, _ = chol_with_jitter(K_mm, hp.signal_var)
    K_sm = kernel_matrix(Xstar, Z.Z, hp).values
    a = cho_solve((L, True), K_sm.T)                 # m x n*, K_mm^-1 k_m*
    mean = vs.var_mean @ a
    v = solve_triangular(L, K_sm.T, lower=True)
    t = vs.cov_factor.T @ a
    var = hp.signal_var - np.sum(v * v, axis=0) + np.sum(t * t, axis=0)
    clamped = int(np.sum(var < 0))
    var = np.maximum(var, 0.0)
    if flavor == "observed":
        var = var + hp.noise_var
    return PredictiveDistribution(mean, var, flavor=flavor,
                                  diagnostics={"negative_variance_clamps": clamped})
