"""Limited-memory BFGS with a backtracking Armijo line search."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    status: str
    trace: list = field(default_factory=list)


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
        rho = 1.0 / (y @ s)
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def minimize_lbfgs(
    fun,
    x0,
    max_iters=500,
    grad_tol=1e-6,
    memory=10,
    c1=1e-4,
    shrink=0.5,
    max_backtracks=50,
    callback=None,
):
    """Minimize ``fun`` where ``fun(x) -> (f, grad)``.

    Non-finite objective values during the line search are treated as a
    failed Armijo test, so the step is shrunk and the iterate rolled back.
    The returned ``trace`` holds the objective at every accepted iterate and
    is non-increasing.

    Returns
    -------
    LBFGSResult
        ``status`` is one of ``"converged"``, ``"max_iters"``, ``"stalled"``.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise FloatingPointError("objective is not finite at the starting point")
    trace = [float(f)]
    s_hist, y_hist = [], []
    status = "max_iters"
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        if np.max(np.abs(g)) < grad_tol:
            status = "converged"
            n_iter -= 1
            break
        d = _two_loop(g, s_hist, y_hist)
        slope = g @ d
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
            slope = g @ d
        step = 1.0 if s_hist else min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * d
            try:
                f_new, g_new = fun(x_new)
            except (ArithmeticError, np.linalg.LinAlgError):
                f_new, g_new = np.inf, None
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope and np.all(np.isfinite(g_new)):
                accepted = True
                break
            step *= shrink
        if not accepted:
            if s_hist:
                # curvature memory may be stale; retry once along -g
                s_hist.clear()
                y_hist.clear()
                continue
            status = "stalled"
            break
        s_vec, y_vec = x_new - x, g_new - g
        if s_vec @ y_vec > 1e-12 * (y_vec @ y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, float(f_new), g_new
        trace.append(f)
        if callback is not None:
            callback(x, f)
    else:
        if np.max(np.abs(g)) < grad_tol:
            status = "converged"
    return LBFGSResult(x, f, g, n_iter, status == "converged", status, trace)
