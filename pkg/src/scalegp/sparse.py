"""Sparse GP approximations under one Nystrom-based core.

SoR, DTC, FITC and PIC modify the joint prior, VFE lower-bounds the exact
evidence; all five share the evidence template

    log q(y) = -n/2 log(2pi) - 1/2 log|G| - 1/2 y^T G^-1 y,
    G = Q_nn + Correction + noise_var * I,

with a method-specific correction (zero for SoR/DTC/VFE, diag[K - Q] for
FITC, blockdiag[K - Q] for PIC) and, for VFE, the additional trace penalty
-(1/(2*noise_var)) * Tr(K_nn - Q_nn).

Everything is evaluated through the m x m inner matrix
B = I + V^T Lam^-1 V (V = K_nm L^-T, K_mm = L L^T), never through an n x n
factorization, so one evidence/gradient evaluation costs O(n m^2) (plus
O(n m0^2) for PIC's blocks).  Gradients cover the kernel hyperparameters
and, when requested, the inducing locations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .aggregation import Partition
from .data import Dataset
from .exceptions import DimensionError, NumericalError
from .full import LOG_2PI, PredictiveDistribution
from .kernel import Hyperparameters, chol_with_jitter, kernel_matrix
from .optimize import OptTrace, guarded_objective, minimize_deterministic

METHODS = ("sor", "dtc", "fitc", "pic", "vfe")


@dataclass(frozen=True)
class InducingSet:
    """m pseudo-input locations; m = 0 is allowed only for PIC, whose zero-
    inducing limit is the pure local GP."""

    Z: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        object.__setattr__(self, "Z", Z)
        if Z.size and not np.all(np.isfinite(Z)):
            raise ValueError("inducing locations must be finite")

    @property
    def m(self) -> int:
        return self.Z.shape[0]


def _as_Z(Z) -> InducingSet:
    return Z if isinstance(Z, InducingSet) else InducingSet(np.asarray(Z, dtype=float))


def nystrom(A, B, Z, hp: Hyperparameters) -> np.ndarray:
    """Nystrom surrogate Q_AB = K_AZ K_ZZ^-1 K_ZB via triangular solves."""
    Z = _as_Z(Z)
    if Z.m == 0:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return np.zeros((A.shape[0], B.shape[0]))
    L, _ = chol_with_jitter(kernel_matrix(Z.Z, Z.Z, hp).values, hp.signal_var)
    Va = solve_triangular(L, kernel_matrix(Z.Z, A, hp).values, lower=True)
    Vb = solve_triangular(L, kernel_matrix(Z.Z, B, hp).values, lower=True)
    return Va.T @ Vb


def _blocks(partition: Partition, n: int):
    idx = [partition.indices(k) for k in range(partition.M)]
    if sum(len(i) for i in idx) != n:
        raise DimensionError("partition does not cover the dataset")
    return idx


class _Factors:
    """Shared factorization state for one (method, data, Z, hp) evaluation."""

    def __init__(self, method, data, Z, hp, partition=None):
        method = method.lower()
        if method not in METHODS:
            raise ValueError(f"unknown sparse method {method!r} (choose from {METHODS})")
        if method == "pic" and partition is None:
            raise ValueError("PIC requires a partition")
        if method != "pic" and partition is not None:
            raise ValueError(f"{method} does not take a partition")
        Z = _as_Z(Z)
        if Z.m == 0 and method != "pic":
            raise DimensionError(f"{method} needs at least one inducing point")
        if Z.m and Z.Z.shape[1] != data.d:
            raise DimensionError(
                f"inducing points have d={Z.Z.shape[1]}, data has d={data.d}")

        self.method, self.data, self.Z, self.hp, self.partition = \
            method, data, Z, hp, partition
        n, m = data.n, Z.m
        sf2, sn2 = hp.signal_var, hp.noise_var
        X, y = data.X, data.y
        self.jitter_events = 0

        if m:
            K_mm = kernel_matrix(Z.Z, Z.Z, hp).values
            self.L, jit = chol_with_jitter(K_mm, sf2)
            self.jitter_events += int(jit > 0)
            self.K_mm, self.jitter = K_mm, jit
            self.K_nm = kernel_matrix(X, Z.Z, hp).values
            self.V = solve_triangular(self.L, self.K_nm.T, lower=True).T  # n x m
        else:
            self.L = np.zeros((0, 0))
            self.K_mm = np.zeros((0, 0))
            self.K_nm = np.zeros((n, 0))
            self.V = np.zeros((n, 0))
            self.jitter = 0.0

        self.q_diag = np.sum(self.V * self.V, axis=1)
        self.k_diag = np.full(n, sf2)

        # method-specific effective noise Lam (diagonal or block-diagonal)
        if method == "pic":
            self.block_idx = _blocks(partition, n)
            self.block_K = []
            self.block_chol = []
            for idx in self.block_idx:
                Kb = kernel_matrix(X[idx], X[idx], hp).values
                Vb = self.V[idx]
                lam_b = Kb - Vb @ Vb.T + sn2 * np.eye(idx.size)
                Lb, jit_b = chol_with_jitter(lam_b, sf2)
                self.jitter_events += int(jit_b > 0)
                self.block_K.append(Kb)
                self.block_chol.append(Lb)
            self.lam = None
            self.logdet_lam = 2.0 * sum(
                np.sum(np.log(np.diag(Lb))) for Lb in self.block_chol)
        else:
            if method == "fitc":
                self.lam = self.k_diag - self.q_diag + sn2
            else:  # sor / dtc / vfe
                self.lam = np.full(n, sn2)
            if np.any(self.lam <= 0):
                raise NumericalError("non-positive effective noise in the correction")
            self.logdet_lam = float(np.sum(np.log(self.lam)))

        self.T = self._lam_solve(self.V)                      # Lam^-1 V, n x m
        Bmat = np.eye(m) + self.V.T @ self.T
        self.L_B, _ = chol_with_jitter(Bmat, 1.0)
        self.B = Bmat
        self.Tty = self.T.T @ y                               # V^T Lam^-1 y
        self.c = solve_triangular(self.L_B, self.Tty, lower=True) if m else np.zeros(0)
        lam_inv_y = self._lam_solve(y[:, None])[:, 0]
        if m:
            self.beta = lam_inv_y - self.T @ solve_triangular(
                self.L_B.T, self.c, lower=False)
        else:
            self.beta = lam_inv_y

    def _lam_solve(self, R):
        """Lam^-1 R for a (n, k) right-hand side."""
        if self.method == "pic":
            out = np.empty_like(R)
            for idx, Lb in zip(self.block_idx, self.block_chol):
                out[idx] = cho_solve((Lb, True), R[idx])
            return out
        return R / self.lam[:, None]

    # ---- evidence -------------------------------------------------------

    def evidence(self) -> float:
        n = self.data.n
        logdet_G = self.logdet_lam + 2.0 * np.sum(np.log(np.diag(self.L_B)))
        value = -0.5 * (n * LOG_2PI + logdet_G + float(self.data.y @ self.beta))
        if self.method == "vfe":
            value -= 0.5 / self.hp.noise_var * float(np.sum(self.k_diag - self.q_diag))
        return value

    # ---- gradient -------------------------------------------------------

    def gradient(self, with_z: bool):
        """Gradient of the evidence w.r.t. the packed parameters
        [log l_1..d, log sf2, log sn2] (+ Z.ravel() when ``with_z``)."""
        data, hp, Z = self.data, self.hp, self.Z
        n, m, d = data.n, Z.m, data.d
        sf2, sn2 = hp.signal_var, hp.noise_var
        ls = hp.lengthscales
        X, y = data.X, data.y

        # H = G^-1 - beta beta^T, needed only in O(n m^2) products
        if m:
            W = solve_triangular(self.L, self.V.T, trans="T", lower=True)  # m x n
            Wt = W.T                                                       # n x m
            lam_inv_Wt = self._lam_solve(Wt)
            Ginv_Wt = lam_inv_Wt - self.T @ cho_solve((self.L_B, True), self.V.T @ lam_inv_Wt)
            Wt_beta = Wt.T @ self.beta
            H_Wt = Ginv_Wt - np.outer(self.beta, Wt_beta)
            M_mm = Wt.T @ Ginv_Wt - np.outer(Wt_beta, Wt_beta)  # W H W^T
        else:
            Wt = np.zeros((n, 0))
            H_Wt = np.zeros((n, 0))
            M_mm = np.zeros((0, 0))

        U2 = solve_triangular(self.L_B, self.T.T, lower=True).T if m else np.zeros((n, 0))

        A_nm = np.zeros((n, m))
        A_mm = np.zeros((m, m))
        a_diag = np.zeros(n)
        a_sn2 = 0.0
        block_A = None

        # core Nystrom part: dG contains dQ_nn for every method
        if m:
            A_nm -= H_Wt
            A_mm += 0.5 * M_mm

        # noise part: dG contains d(sn2) * I; PIC needs per-block H diagonals
        if self.method == "pic":
            trace_H = 0.0
            block_A = []
            for idx, Lb in zip(self.block_idx, self.block_chol):
                lam_inv_bb = cho_solve((Lb, True), np.eye(idx.size))
                H_bb = lam_inv_bb - U2[idx] @ U2[idx].T \
                    - np.outer(self.beta[idx], self.beta[idx])
                trace_H += np.trace(H_bb)
                block_A.append(-0.5 * H_bb)
                if m:
                    Wt_b = Wt[idx]
                    HbWb = H_bb @ Wt_b
                    A_nm[idx] += HbWb
                    A_mm -= 0.5 * Wt_b.T @ HbWb
            a_sn2 += -0.5 * trace_H
        else:
            diag_Ginv = 1.0 / self.lam - np.sum(U2 * U2, axis=1)
            h = diag_Ginv - self.beta**2
            a_sn2 += -0.5 * float(np.sum(h))
            if self.method == "fitc":
                a_diag += -0.5 * h
                A_nm += h[:, None] * Wt
                A_mm += -0.5 * Wt.T @ (h[:, None] * Wt)

        if self.method == "vfe":
            # analytic gradient of the trace penalty; dropping these terms
            # silently turns the VFE fit into a DTC fit
            inv_sn2 = 1.0 / sn2
            a_diag += -0.5 * inv_sn2
            A_nm += inv_sn2 * Wt
            A_mm += -0.5 * inv_sn2 * (Wt.T @ Wt)
            a_sn2 += 0.5 * inv_sn2**2 * float(np.sum(self.k_diag - self.q_diag))

        # contract the weights with the kernel-block derivatives
        grad = np.zeros(d + 2 + (m * d if with_z else 0))

        # log signal variance: every kernel entry is proportional to sf2
        g_sf2 = float(np.sum(A_nm * self.K_nm)) + float(np.sum(A_mm * self.K_mm)) \
            + float(np.sum(a_diag)) * sf2
        if block_A is not None:
            g_sf2 += sum(float(np.sum(Ab * Kb))
                         for Ab, Kb in zip(block_A, self.block_K))
        grad[d] = g_sf2

        # log lengthscales: dK = K * scaled squared distance per dimension
        for i in range(d):
            g = 0.0
            if m:
                diff_nm = (X[:, i, None] - Z.Z[None, :, i]) / ls[i]
                g += float(np.sum(A_nm * self.K_nm * diff_nm * diff_nm))
                diff_mm = (Z.Z[:, i, None] - Z.Z[None, :, i]) / ls[i]
                g += float(np.sum(A_mm * self.K_mm * diff_mm * diff_mm))
            if block_A is not None:
                for Ab, Kb, idx in zip(block_A, self.block_K, self.block_idx):
                    diff_bb = (X[idx, i, None] - X[None, idx, i]) / ls[i]
                    g += float(np.sum(Ab * Kb * diff_bb * diff_bb))
            grad[i] = g

        grad[d + 1] = a_sn2 * sn2

        if with_z and m:
            P = A_nm * self.K_nm                       # n x m
            P2 = A_mm * self.K_mm                      # m x m (symmetric weights)
            gZ = (P.T @ X - P.sum(axis=0)[:, None] * Z.Z)
            gZ += 2.0 * (P2.T @ Z.Z - P2.sum(axis=0)[:, None] * Z.Z)
            grad[d + 2:] = (gZ / ls[None, :] ** 2).ravel()
        return grad


def sparse_evidence(method, data: Dataset, Z, hp: Hyperparameters,
                    partition: Optional[Partition] = None, with_z=None):
    """Approximate evidence (or VFE bound) and its gradient.

    Returns ``(value, gradient)`` where the gradient covers the packed log
    hyperparameters and, when ``with_z`` (default: the inducing set's
    ``trainable`` flag), the flattened inducing locations.
    """
    Z = _as_Z(Z)
    if with_z is None:
        with_z = Z.trainable
    fac = _Factors(method, data, Z, hp, partition)
    return fac.evidence(), fac.gradient(with_z=with_z)


@dataclass
class SparseModel:
    """A fitted (or fixed-parameter) sparse GP with cached factors."""

    method: str
    data: Dataset
    Z: InducingSet
    hp: Hyperparameters
    partition: Optional[Partition]
    evidence: float
    factors: _Factors
    trace: Optional[OptTrace] = None
    jitter_events: int = 0


def build_sparse(method, data: Dataset, Z, hp: Hyperparameters,
                 partition: Optional[Partition] = None) -> SparseModel:
    """Cache factors at fixed parameters (no optimization)."""
    Z = _as_Z(Z)
    fac = _Factors(method, data, Z, hp, partition)
    return SparseModel(method=method.lower(), data=data, Z=Z, hp=hp,
                       partition=partition, evidence=fac.evidence(),
                       factors=fac, jitter_events=fac.jitter_events)


def fit_sparse(method, data: Dataset, Z0, hp0: Hyperparameters,
               max_iters=100, grad_tol=1e-6, rel_f_tol=1e-9,
               partition: Optional[Partition] = None) -> SparseModel:
    """Jointly optimize hyperparameters and (if trainable) inducing locations
    by maximizing the sparse evidence with the deterministic optimizer."""
    Z0 = _as_Z(Z0)
    d = data.d
    m = Z0.m
    train_z = Z0.trainable and m > 0

    @guarded_objective
    def objective(v):
        hp = Hyperparameters.from_vector(v[:d + 2])
        Z = InducingSet(v[d + 2:].reshape(m, d), trainable=True) if train_z else Z0
        value, grad = sparse_evidence(method, data, Z, hp,
                                      partition=partition, with_z=train_z)
        return -value, -grad

    x0 = hp0.to_vector()
    if train_z:
        x0 = np.concatenate([x0, Z0.Z.ravel()])
    x_opt, trace = minimize_deterministic(objective, x0, max_iters=max_iters,
                                          grad_tol=grad_tol, rel_f_tol=rel_f_tol)
    hp = Hyperparameters.from_vector(x_opt[:d + 2])
    Z = InducingSet(x_opt[d + 2:].reshape(m, d), trainable=True) if train_z else Z0
    fac = _Factors(method, data, Z, hp, partition)
    model = SparseModel(method=method.lower(), data=data, Z=Z, hp=hp,
                        partition=partition, evidence=fac.evidence(),
                        factors=fac, trace=trace, jitter_events=fac.jitter_events)
    return model


def sparse_predict(model: SparseModel, Xstar, flavor="latent") -> PredictiveDistribution:
    """Method-specific predictive distribution at the test inputs.

    SoR uses the degenerate low-rank kernel; DTC/VFE/FITC keep the exact test
    conditional (k** - Q** + k*m Sigma k_m*); PIC additionally treats the
    test point's own block exactly, routing each test point to its nearest
    partition centroid.
    """
    fac = model.factors
    hp = model.hp
    Xstar = np.atleast_2d(np.asarray(Xstar, dtype=float))
    if Xstar.shape[1] != model.data.d:
        raise DimensionError(
            f"test inputs have d={Xstar.shape[1]}, model has d={model.data.d}")
    sf2, sn2 = hp.signal_var, hp.noise_var

    if model.method == "pic":
        mean, var = _pic_predict(model, Xstar)
    else:
        K_sm = kernel_matrix(Xstar, model.Z.Z, hp).values      # n* x m
        v = solve_triangular(fac.L, K_sm.T, lower=True)        # m x n*
        w = solve_triangular(fac.L_B, v, lower=True)           # m x n*
        mean = w.T @ fac.c
        if model.method == "sor":
            var = np.sum(w * w, axis=0)
        else:
            var = sf2 - np.sum(v * v, axis=0) + np.sum(w * w, axis=0)

    clamped = int(np.sum(var < 0))
    var = np.maximum(var, 0.0)
    if flavor == "observed":
        var = var + sn2
    return PredictiveDistribution(mean, var, flavor=flavor,
                                  diagnostics={"negative_variance_clamps": clamped})


def _pic_predict(model: SparseModel, Xstar):
    fac, hp = model.factors, model.hp
    sf2 = hp.signal_var
    n_star = Xstar.shape[0]
    mean = np.empty(n_star)
    var = np.empty(n_star)
    m = model.Z.m
    blocks = np.array([model.partition.block_of(x) for x in Xstar])
    for j in np.unique(blocks):
        sel = np.flatnonzero(blocks == j)
        idx_j = fac.block_idx[j]
        if m:
            K_sm = kernel_matrix(Xstar[sel], model.Z.Z, hp).values
            v = solve_triangular(fac.L, K_sm.T, lower=True)    # m x |sel|
            khat = fac.V @ v                                   # n x |sel|, Q_*n
        else:
            khat = np.zeros((model.data.n, sel.size))
        khat[idx_j] = kernel_matrix(model.data.X[idx_j], Xstar[sel], hp).values
        mean[sel] = khat.T @ fac.beta
        # G^-1 khat via Woodbury with the cached block/inner factors
        r = fac._lam_solve(khat)
        if m:
            r -= fac.T @ cho_solve((fac.L_B, True), fac.V.T @ r)
        var[sel] = sf2 - np.sum(khat * r, axis=0)
    return mean, var
