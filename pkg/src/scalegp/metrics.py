"""Prediction-quality metrics: SMSE and MSLL.

Both are computed in whatever target space the caller works in; the harness
uses normalized targets, where the MSLL baseline is the standard normal.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def smse(y_true, mu, y_train_var) -> float:
    """Standardized mean square error:
    sum((y - mu)^2) / (n * var(y_train)).  Equals ~1 for the trivial
    train-mean predictor."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    if y_true.size != mu.size:
        raise DimensionError(f"length mismatch: {y_true.size} targets vs {mu.size} means")
    if y_train_var <= 0:
        raise ValueError("y_train_var must be positive")
    return float(np.sum((y_true - mu) ** 2) / (y_true.size * y_train_var))


def msll(y_true, mu, var_observed, y_train_mean, y_train_var) -> float:
    """Mean standardized log loss: average of
    log N(y | train_mean, train_var) - log N(y | mu, var_observed).

    ``var_observed`` must be the observed-flavor predictive variance
    (latent variance plus noise variance).  Zero for the trivial predictor,
    negative for good models.
    """
    y_true = np.asarray(y_true, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    var = np.asarray(var_observed, dtype=float).ravel()
    if not (y_true.size == mu.size == var.size):
        raise DimensionError("y_true, mu and var_observed must have equal length")
    if np.any(var <= 0):
        raise ValueError("var_observed must be positive elementwise")
    if y_train_var <= 0:
        raise ValueError("y_train_var must be positive")
    log_model = -0.5 * (np.log(2 * np.pi * var) + (y_true - mu) ** 2 / var)
    log_trivial = -0.5 * (np.log(2 * np.pi * y_train_var)
                          + (y_true - y_train_mean) ** 2 / y_train_var)
    return float(np.mean(log_trivial - log_model))
