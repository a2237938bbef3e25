"""Fletcher-Reeves nonlinear conjugate-gradient ascent with Armijo search.

The optimizer is manifold-agnostic: it sees flat parameter vectors and a
callable returning (value, gradient).  Callers own any retraction onto
SO(3).  Maximization throughout; accepted steps never decrease the value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import OptimizationError

__all__ = ["Objective", "OptimOptions", "OptimReport", "maximize_cgfr", "check_gradient"]

# A callable x -> (value, gradient); gradient has the same length as x.
Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimOptions:
    max_iters: int = 50
    gtol: float = 1e-6  # on |g|_inf
    step_tol: float = 1e-10  # on |accepted step|_inf
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    restart: int | None = None  # direction reset period; None = problem dimension
    initial_step: float = 1.0
    max_backtracks: int = 40
    max_expansions: int = 12

    def __post_init__(self):
        if self.max_iters < 1 or self.gtol <= 0.0 or self.step_tol <= 0.0:
            raise ValueError("max_iters, gtol and step_tol must be positive")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtracking factor must be in (0, 1)")
        if self.armijo_c <= 0.0 or self.initial_step <= 0.0:
            raise ValueError("armijo_c and initial_step must be positive")
        if self.restart is not None and self.restart < 1:
            raise ValueError("restart period must be >= 1")


@dataclass
class OptimReport:
    x: np.ndarray
    value: float
    iterations: int
    reason: str  # "gradient" | "step" | "max-iters"
    values: np.ndarray  # accepted-value trace, non-decreasing
    n_evals: int = 0


def _eval(obj: Objective, x: np.ndarray, best: OptimReport | None) -> tuple[float, np.ndarray]:
    f, g = obj(x)
    g = np.asarray(g, dtype=float)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("non-finite objective or gradient", report=best)
    return float(f), g


def maximize_cgfr(obj: Objective, x0, opts: OptimOptions = OptimOptions()) -> OptimReport:
    """Maximize by conjugate gradient with Fletcher-Reeves updates.

    Ascent direction d is reset to the gradient every ``restart`` iterations
    and whenever it stops being an ascent direction.  The line search
    backtracks until the Armijo condition holds and then greedily doubles
    the step while the value keeps improving, which approximates an exact
    search on smooth objectives.  The first trial step of each iteration is
    twice the previously accepted one.

    Raises:
        OptimizationError: non-finite value/gradient; the exception carries
            the last good report.
    """
    x = np.asarray(x0, dtype=float).copy()
    restart = opts.restart if opts.restart is not None else max(x.size, 1)
    f, g = _eval(obj, x, None)
    trace = [f]
    n_evals = 1
    last_good = OptimReport(x=x.copy(), value=f, iterations=0, reason="max-iters",
                            values=np.array(trace), n_evals=n_evals)
    d = g.copy()
    gg = float(g @ g)
    step_prev = opts.initial_step / 2.0  # first trial is exactly initial_step
    it = 0
    while True:
        if np.abs(g).max() <= opts.gtol:
            reason = "gradient"
            break
        if it >= opts.max_iters:
            reason = "max-iters"
            break
        it += 1
        if it % restart == 0 or float(g @ d) <= 0.0:
            d = g.copy()
        slope = float(g @ d)

        # Backtracking Armijo line search with greedy expansion.
        alpha = 2.0 * step_prev
        accepted = None
        for _ in range(opts.max_backtracks):
            f_try, g_try = _eval(obj, x + alpha * d, last_good)
            n_evals += 1
            if f_try >= f + opts.armijo_c * alpha * slope:
                accepted = (alpha, f_try, g_try)
                break
            alpha *= opts.backtrack
        if accepted is None:
            reason = "step"
            break
        alpha, f_new, g_new = accepted
        for _ in range(opts.max_expansions):
            alpha2 = 2.0 * alpha
            f2, g2 = _eval(obj, x + alpha2 * d, last_good)
            n_evals += 1
            if f2 > f_new and f2 >= f + opts.armijo_c * alpha2 * slope:
                alpha, f_new, g_new = alpha2, f2, g2
            else:
                break

        step = alpha * float(np.abs(d).max())
        x = x + alpha * d
        f = f_new
        trace.append(f)
        gg_new = float(g_new @ g_new)
        beta = gg_new / gg if gg > 0.0 else 0.0
        d = g_new + beta * d
        g = g_new
        gg = gg_new
        step_prev = alpha
        last_good = OptimReport(x=x.copy(), value=f, iterations=it, reason="max-iters",
                                values=np.array(trace), n_evals=n_evals)
        if step <= opts.step_tol:
            reason = "step"
            break

    return OptimReport(x=x.copy(), value=f, iterations=it, reason=reason,
                       values=np.array(trace), n_evals=n_evals)


def check_gradient(obj: Objective, x, h: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Per coordinate: |g_fd - g| / max(1, |g_fd|).  Used to harness-test the
    analytic window-objective derivatives.
    """
    if h <= 0.0:
        raise ValueError("finite-difference step h must be positive")
    x = np.asarray(x, dtype=float)
    _, g = obj(x)
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp, _ = obj(x + e)
        fm, _ = obj(x - e)
        g_fd = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(g_fd - g[i]) / max(1.0, abs(g_fd)))
    return worst
