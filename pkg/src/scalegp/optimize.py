"""Gradient-based optimizers shared by every model in the package.

``minimize_deterministic`` is a Polak-Ribiere conjugate-gradient descent with
a strong-Wolfe line search; ``minimize_stochastic`` is an Adadelta-style rule
(decayed squared-gradient accumulators plus momentum) for minibatch
objectives; ``check_gradient`` validates analytic gradients against central
finite differences.

Objectives are callables returning ``(value, gradient)``; the stochastic
variant receives an extra batch-index argument.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

from .exceptions import NumericalError


@dataclass
class ObjectiveEvaluation:
    """One objective evaluation: value, gradient and the running eval count."""

    value: float
    gradient: np.ndarray
    eval_count: int

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value) and np.all(np.isfinite(self.gradient)))


@dataclass
class OptTrace:
    """Per-iteration optimizer record: (iter, value, gradient_norm, step_size)."""

    iterations: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    status: str = "running"
    eval_count: int = 0

    def append(self, it, value, grad_norm, step_size, wall_time):
        self.iterations.append((it, float(value), float(grad_norm), float(step_size)))
        self.wall_times.append(float(wall_time))

    @property
    def values(self) -> np.ndarray:
        return np.array([row[1] for row in self.iterations])

    @property
    def final_value(self) -> float:
        return self.iterations[-1][1]


class _CachedObjective:
    """Caches the last few evaluations so a line search and the surrounding
    loop never evaluate the same point twice."""

    def __init__(self, objective):
        self._objective = objective
        self._cache = {}
        self.eval_count = 0

    def evaluate(self, x) -> ObjectiveEvaluation:
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            value, grad = self._objective(x)
            self.eval_count += 1
            hit = ObjectiveEvaluation(value=float(value),
                                      gradient=np.asarray(grad, dtype=float),
                                      eval_count=self.eval_count)
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def __call__(self, x):
        ev = self.evaluate(x)
        return ev.value, ev.gradient

    def value(self, x):
        return self.evaluate(np.asarray(x)).value

    def grad(self, x):
        return self.evaluate(np.asarray(x)).gradient.copy()


def guarded_objective(objective):
    """Wrap an objective so that numerical failures at extreme trial points
    (overflowed kernels, failed factorizations) evaluate to +inf instead of
    raising; line searches and the stochastic rule then back off.  A failure
    at the starting point still surfaces as an error."""

    def wrapped(x, *args):
        try:
            value, grad = objective(x, *args)
        except NumericalError:
            return np.inf, np.zeros_like(np.asarray(x, dtype=float))
        if not np.isfinite(value):
            return np.inf, np.zeros_like(np.asarray(x, dtype=float))
        return value, grad

    return wrapped


def minimize_deterministic(objective, x0, max_iters=100, grad_tol=1e-6, rel_f_tol=1e-9):
    """Minimize a smooth objective with nonlinear conjugate-gradient descent.

    Polak-Ribiere(+) directions with a strong-Wolfe line search; on a failed
    line search the direction is reset to steepest descent once, after which
    the run stops with status ``line_search_failed``.  Terminates on
    ``max_iters``, gradient norm below ``grad_tol``, or relative improvement
    below ``rel_f_tol``.  Returns ``(x, OptTrace)`` with the trace values
    non-increasing.
    """
    x = np.asarray(x0, dtype=float).copy()
    fun = _CachedObjective(objective)
    trace = OptTrace()
    t0 = time.perf_counter()

    f, g = fun(x)
    if not np.isfinite(f):
        raise NumericalError(f"objective is non-finite at the starting point (f={f})")
    trace.append(0, f, np.linalg.norm(g), 0.0, time.perf_counter() - t0)

    d = -g
    # seeds the first trial step of the Wolfe search at ~1/|g| instead of 1
    f_older = f + np.linalg.norm(g) / 2.0
    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) <= grad_tol:
            trace.status = "converged_grad"
            break
        t_it = time.perf_counter()
        if float(d @ g) >= 0.0:  # not a descent direction; reset
            d = -g
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            alpha, _, _, f_new, _, _ = line_search(
                fun.value, fun.grad, x, d, gfk=g, old_fval=f,
                old_old_fval=f_older, c1=1e-4, c2=0.4, maxiter=40,
            )
        wolfe_ok = alpha is not None
        if not wolfe_ok:
            alpha, f_new = _backtrack(fun, x, d, f, float(g @ d))
        if alpha is None:
            if np.array_equal(d, -g):
                trace.status = "line_search_failed"
                break
            # one restart along steepest descent, then give up
            d = -g
            continue
        x = x + alpha * d
        g_new = fun.grad(x)  # usually a cache hit from the line search
        f_prev, f = f, float(f_new)
        f_older = f_prev
        if wolfe_ok:
            beta = max(0.0, float(g_new @ (g_new - g)) / max(float(g @ g), 1e-300))
        else:
            beta = 0.0  # Armijo-only step: conjugacy is unreliable, restart
        d = -g_new + beta * d
        g = g_new
        trace.append(it, f, np.linalg.norm(g), alpha, time.perf_counter() - t_it)
        # a tiny Armijo rescue step is not evidence of convergence
        if wolfe_ok and abs(f_prev - f) <= rel_f_tol * max(1.0, abs(f_prev)):
            trace.status = "converged_rel_f"
            break
    else:
        trace.status = "max_iters"
    trace.eval_count = fun.eval_count
    return x, trace


def _backtrack(fun, x, d, f0, slope, c1=1e-4, shrink=0.5, max_halvings=40):
    """Armijo backtracking: largest alpha in {1, 1/2, ...} with sufficient
    decrease.  Returns (alpha, f_new) or (None, None)."""
    if slope >= 0.0:
        return None, None
    alpha = 1.0
    for _ in range(max_halvings):
        f_new = fun.value(x + alpha * d)
        if np.isfinite(f_new) and f_new <= f0 + c1 * alpha * slope:
            return alpha, f_new
        alpha *= shrink
    return None, None


def minimize_stochastic(objective, x0, config, n_items=None):
    """Minimize a stochastic objective with an Adadelta-style adaptive rule.

    ``objective(x, batch)`` must return an unbiased ``(value, gradient)``
    estimate for the given index batch (``batch`` is ``None`` when
    ``n_items`` is ``None``).  Batches are drawn without replacement per
    epoch and reshuffled each epoch from ``config.seed``; the trace is
    deterministic under a fixed seed.

    Non-finite evaluations are rejected: the iterate and the accumulators
    stay untouched and the step rate is halved for the retry; after 30
    consecutive rejections the run aborts.
    """
    x = np.asarray(x0, dtype=float).copy()
    rng = np.random.default_rng(config.seed)
    p = x.size
    gms = np.zeros(p)  # decayed squared gradients
    sms = np.zeros(p)  # decayed squared steps
    prev_step = np.zeros(p)
    offset = 1e-4
    rate_scale = 1.0
    rejects = 0
    trace = OptTrace()

    def batches():
        if n_items is None:
            while True:
                yield None
        else:
            b = min(config.batch_size, n_items)
            while True:
                order = rng.permutation(n_items)
                for start in range(0, n_items, b):
                    yield order[start:start + b]

    batch_iter = batches()
    it = 0
    while it < config.max_iters:
        batch = next(batch_iter)
        t_it = time.perf_counter()
        # momentum look-ahead, then the adaptive correction at the shifted point
        step1 = config.momentum * prev_step
        value, grad = objective(x - step1, batch)
        grad = np.asarray(grad, dtype=float)
        trace.eval_count += 1
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            rejects += 1
            rate_scale *= 0.5
            if rejects >= 30:
                trace.status = "aborted_non_finite"
                raise NumericalError(
                    "stochastic optimizer hit 30 consecutive non-finite evaluations"
                )
            continue
        it += 1
        gms = config.decay * gms + (1.0 - config.decay) * grad * grad
        step2 = (config.step_rate * rate_scale
                 * np.sqrt((sms + offset) / (gms + offset)) * grad)
        x = x - step1 - step2
        step = step1 + step2
        sms = config.decay * sms + (1.0 - config.decay) * step * step
        prev_step = step
        rate_scale = 1.0
        rejects = 0
        trace.append(it, value, np.linalg.norm(grad),
                     float(np.mean(np.abs(step))), time.perf_counter() - t_it)
    trace.status = "max_iters"
    return x, trace


def check_gradient(objective, x0, step=1e-5):
    """Max relative error between the analytic gradient and central finite
    differences, with relative error
    ``|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`` per coordinate."""
    x0 = np.asarray(x0, dtype=float)
    _, g_analytic = objective(x0)
    g_analytic = np.asarray(g_analytic, dtype=float)
    worst = 0.0
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        fp, _ = objective(xp)
        fm, _ = objective(xm)
        g_fd = (fp - fm) / (2.0 * step)
        denom = max(1e-8, abs(g_analytic[i]) + abs(g_fd))
        worst = max(worst, abs(g_analytic[i] - g_fd) / denom)
    return worst
