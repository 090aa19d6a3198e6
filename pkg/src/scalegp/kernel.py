"""Squared-exponential ARD kernel, kernel matrices and analytic derivatives.

All positive hyperparameters are stored in log space so that unconstrained
optimizers can be applied directly.  Every function here is pure: no shared
mutable state, safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky

from .exceptions import DimensionError, NumericalError

@dataclass(frozen=True)
class Hyperparameters:
    """Log-parameterized SE-ARD hyperparameters.

    ``log_lengthscales`` has one entry per input dimension; ``log_signal_var``
    and ``log_noise_var`` are the logs of the signal and noise variances.
    """

    log_lengthscales: np.ndarray
    log_signal_var: float
    log_noise_var: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_signal_var", float(self.log_signal_var))
        object.__setattr__(self, "log_noise_var", float(self.log_noise_var))
        if ls.ndim != 1:
            raise DimensionError("log_lengthscales must be a 1-d array")
        vals = np.concatenate([ls, [self.log_signal_var, self.log_noise_var]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("hyperparameters must be finite")

    @property
    def d(self) -> int:
        return self.log_lengthscales.size

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_var(self) -> float:
        return float(np.exp(self.log_signal_var))

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_noise_var))

    def to_vector(self) -> np.ndarray:
        """Pack as [log_lengthscales..., log_signal_var, log_noise_var]."""
        return np.concatenate(
            [self.log_lengthscales, [self.log_signal_var, self.log_noise_var]]
        )

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Hyperparameters":
        v = np.asarray(v, dtype=float)
        return cls(v[:-2].copy(), v[-2], v[-1])

    @classmethod
    def default(cls, d: int) -> "Hyperparameters":
        """Standard initialization for normalized data:
        lengthscales 0.5, signal variance 1.0, noise variance 0.1."""
        return cls(np.full(d, np.log(0.5)), 0.0, np.log(0.1))


@dataclass(frozen=True)
class KernelMatrix:
    """A kernel matrix plus the diagonal jitter that was added to it."""

    values: np.ndarray
    jitter_applied: float = 0.0


def _check_inputs(A, B, hp):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != hp.d or B.shape[1] != hp.d:
        raise DimensionError(
            f"input dimension mismatch: A has d={A.shape[1]}, B has d={B.shape[1]}, "
            f"hyperparameters have d={hp.d}"
        )
    return A, B


def se_ard(x, x_prime, hp: Hyperparameters) -> float:
    """SE-ARD covariance between two points:
    sf2 * exp(-0.5 * sum_i (x_i - x'_i)^2 / l_i^2)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(x_prime, dtype=float))
    if x.shape != xp.shape or x.size != hp.d:
        raise DimensionError(
            f"se_ard: expected two {hp.d}-vectors, got {x.shape} and {xp.shape}"
        )
    r2 = np.sum(((x - xp) / hp.lengthscales) ** 2)
    return hp.signal_var * float(np.exp(-0.5 * r2))


def _scaled_sqdist(A, B, lengthscales):
    """Pairwise sum_i (a_i - b_i)^2 / l_i^2, computed per dimension in double
    precision (no ||a||^2 + ||b||^2 - 2ab shortcut, for bit-stable tests)."""
    n_a, n_b = A.shape[0], B.shape[0]
    r2 = np.zeros((n_a, n_b))
    for i in range(A.shape[1]):
        diff = (A[:, i, None] - B[None, :, i]) / lengthscales[i]
        r2 += diff * diff
    return r2


def kernel_matrix(A, B, hp: Hyperparameters) -> KernelMatrix:
    """Dense SE-ARD kernel matrix K(A, B). No jitter is added here."""
    A, B = _check_inputs(A, B, hp)
    r2 = _scaled_sqdist(A, B, hp.lengthscales)
    return KernelMatrix(hp.signal_var * np.exp(-0.5 * r2), jitter_applied=0.0)


def kernel_gradients(A, B, hp: Hyperparameters, wrt) -> np.ndarray:
    """Analytic derivative of K(A, B) with respect to one parameter.

    ``wrt`` selects the parameter:
      * ``("log_lengthscale", i)`` -> dK/d(log l_i), an n_a x n_b matrix
      * ``("log_signal_var",)``    -> dK/d(log sf2) = K itself
      * ``("input_row", r)``       -> dK/dA[r, :], a (d, n_a, n_b) array whose
        slice [i] is the derivative w.r.t. the i-th coordinate of row r of A
        (nonzero only in row r).
    """
    A, B = _check_inputs(A, B, hp)
    K = kernel_matrix(A, B, hp).values
    ls = hp.lengthscales
    kind = wrt[0]
    if kind == "log_signal_var":
        return K.copy()
    if kind == "log_lengthscale":
        i = int(wrt[1])
        if not 0 <= i < hp.d:
            raise DimensionError(f"lengthscale index {i} out of range for d={hp.d}")
        diff = (A[:, i, None] - B[None, :, i]) / ls[i]
        return K * diff * diff
    if kind == "input_row":
        r = int(wrt[1])
        if not 0 <= r < A.shape[0]:
            raise DimensionError(f"row index {r} out of range for A with {A.shape[0]} rows")
        out = np.zeros((hp.d,) + K.shape)
        for i in range(hp.d):
            out[i, r, :] = -K[r, :] * (A[r, i] - B[:, i]) / ls[i] ** 2
        return out
    raise DimensionError(f"unknown parameter selector {wrt!r}")


def chol_with_jitter(K, signal_var, lower=True):
    """Cholesky-factorize a self-covariance matrix, escalating diagonal jitter
    from 1e-10*sf2 by factors of 10 up to 1e-4*sf2 before giving up.

    Returns (L, jitter_applied). Raises NumericalError with the attempted
    jitter trail when even the largest jitter fails.
    """
    K = np.asarray(K, dtype=float)
    if K.shape[0] != K.shape[1]:
        raise DimensionError("jittered Cholesky requires a square matrix")
    if K.shape[0] == 0:
        return np.zeros((0, 0)), 0.0
    if not np.all(np.isfinite(K)):
        raise NumericalError("matrix contains non-finite entries; cannot factorize")
    ladder = [0.0] + [signal_var * 10.0**e for e in range(-10, -3)]
    trail = []
    for jitter in ladder:
        if jitter > 0.0:
            trail.append(jitter)
        try:
            L = cholesky(K + jitter * np.eye(K.shape[0]), lower=lower)
            return L, jitter
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"Cholesky factorization failed after jitter escalation (tried {trail})",
        jitter_trail=trail,
    )
