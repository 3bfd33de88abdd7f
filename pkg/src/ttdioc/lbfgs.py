"""Limited-memory BFGS with a strong Wolfe line search.

Dense, small-scale (a few hundred unknowns). Memory 10, two-loop recursion,
bracketing plus bisection zoom for the Wolfe conditions (c1 = 1e-4, c2 = 0.9).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .duals import BoxedFunction

_C1 = 1e-4
_C2 = 0.9
_MAX_ZOOM = 40
_MAX_EXPAND = 60


class LineSearchStagnation(RuntimeError):
    """Line search failed to satisfy the Wolfe conditions.

    Carries the best iterate seen so far (``best_x``, ``best_f``); raised for
    objectives unbounded below (no minimizer along the ray) or numerically
    flat directions.
    """

    def __init__(self, msg: str, best_x: np.ndarray, best_f: float):
        super().__init__(msg)
        self.best_x = best_x
        self.best_f = best_f


@dataclass
class LbfgsResult:
    x: np.ndarray
    fval: float
    grad: np.ndarray
    grad_norm: float
    converged: bool
    iterations: int
    n_evals: int


def _finite_eval(f: BoxedFunction, x: np.ndarray):
    try:
        fv, g = f(x)
    except FloatingPointError:
        return np.inf, np.zeros_like(x)
    if not np.isfinite(fv) or not np.all(np.isfinite(g)):
        return np.inf, np.zeros_like(x)
    return fv, g


def _wolfe_search(f, x, fx, gx, d, alpha0, state):
    """Strong Wolfe search along d. Returns (alpha, f, g) at the accepted point.

    Near the optimum, objective differences sink below rounding while the
    directional derivative is still informative, so a point also counts as
    acceptable when the curvature condition holds and the objective did not
    increase beyond a rounding-level slack (approximate Wolfe).
    """
    phi0 = fx
    dphi0 = float(gx @ d)
    if dphi0 >= 0:
        raise LineSearchStagnation("non-descent direction", state["best_x"], state["best_f"])
    eps_f = 1e-13 * (1.0 + abs(phi0))

    def phi(a):
        fv, g = _finite_eval(f, x + a * d)
        state["evals"] += 1
        if fv < state["best_f"]:
            state["best_f"] = fv
            state["best_x"] = x + a * d
        return fv, g

    def acceptable(a, fa, dphia):
        armijo = fa <= phi0 + _C1 * a * dphi0 + eps_f
        return armijo and abs(dphia) <= -_C2 * dphi0

    def zoom(lo, f_lo, g_lo, hi, f_hi):
        for _ in range(_MAX_ZOOM):
            a = 0.5 * (lo + hi)
            fa, ga = phi(a)
            dphia = float(ga @ d)
            if acceptable(a, fa, dphia):
                return a, fa, ga
            if fa > phi0 + _C1 * a * dphi0 + eps_f or fa >= f_lo:
                hi, f_hi = a, fa
            else:
                if dphia * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, g_lo = a, fa, ga
        if f_lo <= phi0 + eps_f and lo > 0.0:
            # sufficient decrease holds at lo even though curvature never did;
            # accept rather than discard progress
            return lo, f_lo, g_lo
        raise LineSearchStagnation(
            "line search stagnated after 40 bisections", state["best_x"], state["best_f"]
        )

    a_prev, f_prev, g_prev = 0.0, phi0, gx
    a = alpha0
    for it in range(_MAX_EXPAND):
        fa, ga = phi(a)
        dphia = float(ga @ d) if np.isfinite(fa) else np.inf
        if np.isfinite(fa) and acceptable(a, fa, dphia):
            return a, fa, ga
        if fa > phi0 + _C1 * a * dphi0 + eps_f or (fa >= f_prev and it > 0):
            return zoom(a_prev, f_prev, g_prev, a, fa)
        if dphia >= 0:
            return zoom(a, fa, ga, a_prev, f_prev)
        a_prev, f_prev, g_prev = a, fa, ga
        a *= 2.0
    raise LineSearchStagnation(
        "line search expanded without bracketing (objective unbounded below?)",
        state["best_x"],
        state["best_f"],
    )


def lbfgs_minimize(
    f: BoxedFunction,
    x0,
    tol_grad: float = 1e-9,
    max_iter: int = 5000,
    memory: int = 10,
    callback=None,
) -> LbfgsResult:
    """Minimize f from x0; returns the best iterate with a convergence flag.

    Convergence means ||grad||_2 <= tol_grad. Raises LineSearchStagnation when
    no Wolfe point exists along the current direction (carries best iterate).
    """
    if tol_grad <= 0:
        raise ValueError("tol_grad must be positive")
    x = np.array(x0, dtype=float)
    fx, gx = f(x)
    if not np.isfinite(fx):
        raise LineSearchStagnation("non-finite initial objective", x, fx)
    state = {"best_f": fx, "best_x": x.copy(), "evals": 1}
    hist_s: deque = deque(maxlen=memory)
    hist_y: deque = deque(maxlen=memory)
    gnorm = float(np.linalg.norm(gx))
    it = 0
    while gnorm > tol_grad and it < max_iter:
        d = -_two_loop(gx, hist_s, hist_y)
        if float(gx @ d) >= 0:
            hist_s.clear()
            hist_y.clear()
            d = -gx
        alpha0 = 1.0 if hist_s else min(1.0, 1.0 / max(gnorm, 1.0))
        a, fnew, gnew = _wolfe_search(f, x, fx, gx, d, alpha0, state)
        s = a * d
        y = gnew - gx
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            hist_s.append(s)
            hist_y.append(y)
        x = x + s
        fx, gx = fnew, gnew
        gnorm = float(np.linalg.norm(gx))
        it += 1
        if callback is not None:
            callback(it, x, fx)
    return LbfgsResult(
        x=x,
        fval=fx,
        grad=gx,
        grad_norm=gnorm,
        converged=gnorm <= tol_grad,
        iterations=it,
        n_evals=state["evals"],
    )


def _two_loop(g, hist_s, hist_y):
    q = g.copy()
    alphas = []
    rhos = []
    for s, y in zip(reversed(hist_s), reversed(hist_y)):
        rho = 1.0 / float(s @ y)
        a = rho * float(s @ q)
        q -= a * y
        alphas.append(a)
        rhos.append(rho)
    if hist_s:
        s, y = hist_s[-1], hist_y[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y), a, rho in zip(zip(hist_s, hist_y), reversed(alphas), reversed(rhos)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q
