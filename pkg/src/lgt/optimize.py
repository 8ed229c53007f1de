"""Limited-memory quasi-Newton minimizer with a backtracking line search.

One real-vector minimizer serves every fitting step in the package:
coefficient inference packs (mu, log sigma) and operator learning packs
the complex eigen-matrices as interleaved (real, imaginary) vectors.

The objective callback returns (f, grad) at a point. Probe points with
non-finite f are treated as failed steps and the line search backtracks;
a non-finite value at the starting point raises NonFiniteObjective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["MinimizeSpec", "MinimizeResult", "NonFiniteObjective", "minimize", "trace_csv"]


class NonFiniteObjective(FloatingPointError):
    """Objective or gradient is NaN/inf where a finite value is required."""


@dataclass(frozen=True)
class MinimizeSpec:
    """Settings for minimize().

    memory is the number of curvature pairs kept for the quasi-Newton
    model; c1 and backtrack are the sufficient-decrease constant and the
    step-shrink factor of the line search.
    """

    max_iters: int = 300
    grad_tol: float = 1e-6
    memory: int = 10
    c1: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-20

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (0.0 < self.c1 < 1.0):
            raise ValueError("c1 must be in (0, 1)")
        if not (0.0 < self.backtrack < 1.0):
            raise ValueError("backtrack must be in (0, 1)")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    grad_norm: float
    status: str  # "grad_tol" | "max_iters" | "line_search_failed"
    n_iters: int
    trace: list = field(default_factory=list)  # (iter, f, grad_norm, step) per accepted iterate

    @property
    def converged(self):
        return self.status == "grad_tol"


def _two_loop(grad, s_list, y_list, rho_list):
    q = grad.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        gamma = np.dot(s, y) / np.dot(y, y)
        q *= gamma
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return q


def minimize(f, x0, spec=None):
    """Minimize a smooth objective from x0; returns a MinimizeResult.

    Deterministic: identical inputs produce identical iterate sequences.
    Every accepted iterate satisfies the sufficient-decrease condition,
    so the trace of f values is non-increasing. Termination is by
    gradient infinity-norm, iteration budget, or a failed line search
    (best point so far is returned with the corresponding status).
    """
    spec = spec or MinimizeSpec()
    x = np.asarray(x0, dtype=np.float64).copy()
    fx, gx = f(x)
    fx = float(fx)
    gx = np.asarray(gx, dtype=np.float64)
    if not np.isfinite(fx) or not np.all(np.isfinite(gx)):
        raise NonFiniteObjective("objective or gradient non-finite at the starting point")

    trace = []
    s_hist, y_hist, rho_hist = [], [], []
    gnorm = float(np.max(np.abs(gx))) if gx.size else 0.0
    status = "max_iters"
    it = 0
    while it < spec.max_iters:
        if gnorm < spec.grad_tol:
            status = "grad_tol"
            break
        p = -_two_loop(gx, s_hist, y_hist, rho_hist)
        dphi = float(np.dot(gx, p))
        if dphi >= 0.0:
            # Quasi-Newton model lost descent; fall back to steepest descent.
            p = -gx
            dphi = float(np.dot(gx, p))
            s_hist, y_hist, rho_hist = [], [], []

        if s_hist:
            alpha = 1.0
        else:
            alpha = min(1.0, 1.0 / max(float(np.sum(np.abs(gx))), 1e-30))
        accepted = None
        while alpha > spec.min_step:
            x_try = x + alpha * p
            f_try, g_try = f(x_try)
            f_try = float(f_try)
            if np.isfinite(f_try) and f_try <= fx + spec.c1 * alpha * dphi:
                accepted = (alpha, x_try, f_try, g_try)
                break
            alpha *= spec.backtrack
        if accepted is None:
            status = "line_search_failed"
            break
        alpha, x_new, f_new, g_new = accepted

        # One interpolation polish: the quadratic through phi(0), phi'(0),
        # phi(alpha) is exact for quadratic objectives, which makes the
        # line search exact there (finite termination on quadratics).
        denom = 2.0 * (f_new - fx - dphi * alpha)
        if denom > 0.0:
            alpha_q = -dphi * alpha * alpha / denom
            if np.isfinite(alpha_q) and alpha_q > 0 and abs(alpha_q - alpha) > 1e-2 * alpha:
                x_q = x + alpha_q * p
                f_q, g_q = f(x_q)
                f_q = float(f_q)
                if np.isfinite(f_q) and f_q < f_new and f_q <= fx + spec.c1 * alpha_q * dphi:
                    alpha, x_new, f_new, g_new = alpha_q, x_q, f_q, g_q

        g_new = np.asarray(g_new, dtype=np.float64)
        if not np.all(np.isfinite(g_new)):
            raise NonFiniteObjective("gradient non-finite at an accepted point")
        s = x_new - x
        y = g_new - gx
        sy = float(np.dot(s, y))
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > spec.memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, fx, gx = x_new, f_new, g_new
        gnorm = float(np.max(np.abs(gx)))
        it += 1
        trace.append((it, fx, gnorm, alpha))
    else:
        status = "max_iters"
    if gnorm < spec.grad_tol:
        status = "grad_tol"
    return MinimizeResult(x=x, f=fx, grad_norm=gnorm, status=status, n_iters=it, trace=trace)


def trace_csv(result):
    """Render a result's trace as CSV text (iter, f, grad_norm, step_size)."""
    lines = ["iter,f,grad_norm,step_size"]
    for it, fv, gn, st in result.trace:
        lines.append(f"{it},{fv:.17g},{gn:.17g},{st:.17g}")
    return "\n".join(lines) + "\n"
