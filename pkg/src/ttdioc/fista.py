"""Accelerated proximal gradient for quadratic programs with l1 terms.

Solves min_z 0.5 z'Qz + c'z + sum_j w_j |z_j| subject to optional per-entry
nonnegativity and per-entry fixed values. Q must be symmetric positive
semidefinite. Accelerated iteration with restart on objective increase;
termination on the proximal fixed-point residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FistaResult:
    z: np.ndarray
    converged: bool
    iterations: int
    fp_residual: float


def _prox(v, shrink, nonneg):
    out = np.sign(v) * np.maximum(np.abs(v) - shrink, 0.0)
    if nonneg is not None:
        out[nonneg] = np.maximum(out[nonneg], 0.0)
    return out


def fista_solve(
    Q: np.ndarray,
    c: np.ndarray,
    l1_weights=None,
    nonneg_mask=None,
    fixed_mask=None,
    fixed_values=None,
    tol: float = 1e-10,
    max_iter: int = 5000,
    z0=None,
) -> FistaResult:
    """Solve the composite quadratic program; returns best iterate with flag.

    ``l1_weights`` are nonnegative per-entry penalties (None = no penalty).
    ``nonneg_mask`` flags entries constrained to z_j >= 0. ``fixed_mask`` /
    ``fixed_values`` pin entries exactly; they are eliminated from the
    iteration and only contribute through the coupling term.
    """
    Q = np.asarray(Q, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.size
    w = np.zeros(n) if l1_weights is None else np.asarray(l1_weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("l1 weights must be nonnegative")
    nn = np.zeros(n, bool) if nonneg_mask is None else np.asarray(nonneg_mask, bool)
    fx = np.zeros(n, bool) if fixed_mask is None else np.asarray(fixed_mask, bool)
    if not (len(w) == len(nn) == len(fx) == n == Q.shape[0] == Q.shape[1]):
        raise ValueError("inconsistent dimensions")

    z_full = np.zeros(n) if z0 is None else np.array(z0, dtype=float)
    if fx.any():
        z_full[fx] = np.asarray(fixed_values, dtype=float)
    free = ~fx
    if not free.any():
        return FistaResult(z_full, True, 0, 0.0)

    Qff = Q[np.ix_(free, free)]
    cf = c[free] + (Q[np.ix_(free, fx)] @ z_full[fx] if fx.any() else 0.0)
    wf = w[free]
    nnf = nn[free]

    if Qff.size:
        lip = float(np.linalg.eigvalsh(0.5 * (Qff + Qff.T))[-1])
    else:
        lip = 0.0
    lip = max(lip, 1e-12)
    step = 1.0 / lip

    def objective(z):
        return 0.5 * float(z @ (Qff @ z)) + float(cf @ z) + float(wf @ np.abs(z))

    def fp_residual(z):
        g = Qff @ z + cf
        return float(np.max(np.abs((z - _prox(z - step * g, step * wf, nnf)) * lip)))

    z = z_full[free].copy()
    z = _prox(z, 0.0, nnf)  # start feasible
    y = z.copy()
    t = 1.0
    f_prev = objective(z)
    converged = False
    it = 0
    resid = fp_residual(z)
    if resid <= tol:
        converged = True
    else:
        for it in range(1, max_iter + 1):
            g = Qff @ y + cf
            z_new = _prox(y - step * g, step * wf, nnf)
            f_new = objective(z_new)
            if f_new > f_prev + 1e-15 * max(1.0, abs(f_prev)):
                # restart momentum from the last accepted point
                t = 1.0
                y = z.copy()
                g = Qff @ y + cf
                z_new = _prox(y - step * g, step * wf, nnf)
                f_new = objective(z_new)
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = z_new + ((t - 1.0) / t_new) * (z_new - z)
            z, t, f_prev = z_new, t_new, f_new
            if it % 5 == 0 or it == max_iter:
                resid = fp_residual(z)
                if resid <= tol:
                    converged = True
                    break
    z_full[free] = z
    return FistaResult(z_full, converged, it, fp_residual(z))
