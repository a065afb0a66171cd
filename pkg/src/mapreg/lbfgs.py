"""Limited-memory BFGS with a strong-Wolfe line search.

Works on flat float64 vectors; the objective returns ``(value, gradient)``.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class LbfgsOptions:
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 20
    # first-iteration step, as the largest change of any single coordinate
    initial_step: float = 1e-2
    fallback_step: float = 1e-3
    gtol: float = 1e-12
    ftol: float = 1e-12


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    trace: list[float] = field(default_factory=list)
    n_evals: int = 0
    n_fallbacks: int = 0
    message: str = ""


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
    if not np.isfinite(t):
        return None
    return t


def strong_wolfe(phi, f0: float, d0: float, alpha0: float, c1: float, c2: float,
                 max_evals: int, alpha_max: float = 1e10):
    """Line search for a step satisfying the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(f, dphi, payload)``. Returns the accepted
    ``(alpha, f, payload, n_evals)`` or ``(None, best, payload, n_evals)`` when no
    step satisfying the conditions was found in ``max_evals`` evaluations.
    """
    evals = 0
    best = (None, f0, None)
    a_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = alpha0

    def zoom(lo, flo, dlo, hi, fhi, dhi):
        nonlocal evals, best
        while evals < max_evals:
            t = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            left, right = min(lo, hi), max(lo, hi)
            margin = 0.1 * (right - left)
            if t is None or not (left + margin <= t <= right - margin):
                t = 0.5 * (lo + hi)
            ft, dt, pay = phi(t)
            evals += 1
            if ft < best[1]:
                best = (t, ft, pay)
            if ft > f0 + c1 * t * d0 or ft >= flo:
                hi, fhi, dhi = t, ft, dt
            else:
                if abs(dt) <= -c2 * d0:
                    return t, ft, pay
                if dt * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = t, ft, dt
            if abs(hi - lo) < 1e-14 * max(1.0, abs(lo)):
                break
        return None

    while evals < max_evals:
        fa, da, pay = phi(alpha)
        evals += 1
        if not np.isfinite(fa):
            # overshoot into an invalid region: shrink towards the last good point
            alpha = a_prev + 0.25 * (alpha - a_prev)
            continue
        if fa < best[1]:
            best = (alpha, fa, pay)
        if fa > f0 + c1 * alpha * d0 or (evals > 1 and fa >= f_prev):
            res = zoom(a_prev, f_prev, d_prev, alpha, fa, da)
            break
        if abs(da) <= -c2 * d0:
            return alpha, fa, pay, evals
        if da >= 0:
            res = zoom(alpha, fa, da, a_prev, f_prev, d_prev)
            break
        a_prev, f_prev, d_prev = alpha, fa, da
        alpha = min(2.5 * alpha, alpha_max)
    else:
        res = None
    if res is not None:
        return res[0], res[1], res[2], evals
    return None, best[1], best, evals


def minimize_lbfgs(fun: Objective, x0: np.ndarray, max_iter: int,
                   opts: LbfgsOptions | None = None,
                   refresh: Callable[[int], bool] | None = None) -> LbfgsResult:
    """Minimize ``fun`` for at most ``max_iter`` accepted iterations.

    The returned trace holds the objective at the start and after every
    accepted iteration, so it is non-increasing for a fixed objective.
    ``refresh(it)`` runs before iteration ``it > 0``; returning True means the
    objective changed (e.g. a scheduled weight), so value and gradient are
    re-evaluated at the current point and the last trace entry replaced.
    """
    opts = opts or LbfgsOptions()
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    n_evals = 1
    trace = [f]
    s_hist, y_hist = deque(maxlen=opts.memory), deque(maxlen=opts.memory)
    n_fallbacks = 0
    message = "max iterations reached"
    for it in range(max_iter):
        if it > 0 and refresh is not None and refresh(it):
            f, g = fun(x)
            n_evals += 1
            trace[-1] = f
        gnorm = np.max(np.abs(g)) if g.size else 0.0
        if gnorm <= opts.gtol:
            message = "gradient below tolerance"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in reversed(list(zip(s_hist, y_hist))):
            rho = 1.0 / np.dot(y, s)
            a = rho * np.dot(s, q)
            alphas.append((a, rho, s, y))
            q -= a * y
        if s_hist:
            s, y = s_hist[-1], y_hist[-1]
            q *= np.dot(s, y) / np.dot(y, y)
            step0 = 1.0
        else:
            step0 = opts.initial_step / gnorm
        for a, rho, s, y in reversed(alphas):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        direction = -q
        d0 = float(np.dot(g, direction))
        if d0 >= 0:
            # not a descent direction: restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            direction = -g
            d0 = float(np.dot(g, direction))
            step0 = opts.initial_step / gnorm

        def phi(alpha):
            xa = x + alpha * direction
            try:
                fa, ga = fun(xa)
            except FloatingPointError:
                return np.inf, np.inf, None
            return fa, float(np.dot(ga, direction)), (xa, ga)

        alpha, f_new, payload, evals = strong_wolfe(
            phi, f, d0, step0, opts.c1, opts.c2, opts.max_linesearch)
        n_evals += evals
        if alpha is not None:
            x_new, g_new = payload
        else:
            # line search failed: take the best decreasing trial, else a small
            # steepest-descent step
            n_fallbacks += 1
            best_alpha, _, best_payload = payload
            if best_alpha is not None and f_new < f:
                x_new, g_new = best_payload
            else:
                step = opts.fallback_step / gnorm
                x_new = x - step * g
                f_new, g_new = fun(x_new)
                n_evals += 1
                if not f_new < f:
                    message = "line search failed and steepest-descent fallback did not decrease"
                    log.info("L-BFGS stopped at iteration %d: %s", it, message)
                    break
            s_hist.clear()
            y_hist.clear()
        s_vec, y_vec = x_new - x, g_new - g
        if np.dot(s_vec, y_vec) > 1e-12 * np.dot(y_vec, y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
        converged = abs(f - f_new) <= opts.ftol * max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if converged:
            message = "objective change below tolerance"
            break
    return LbfgsResult(x, f, g, trace, n_evals, n_fallbacks, message)
