"""Estimation core: stationarity residuals and cost-model recovery.

For fixed frequencies W the stationarity residual of every training segment
is linear in the stacked unknowns z = (free coefficient entries, active
inequality multipliers, terminal multipliers), so the squared-residual
objective is a convex quadratic assembled once per W (``build_normal_system``)
and solved by FISTA with the l1 term on the time-varying coefficient block
(``solve_inner``). ``refine_frequencies`` wraps this in block-coordinate
descent over W, and ``ttd_ioc`` runs the regularization-weight line search
with model selection by validation error. ``sp_ioc`` is the constant-weight
specialization (no basis functions, no regularizer).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import duals as dm
from .costmodel import FeatureVector, TrigTimeModel, omega_table, squared_features, theta_table
from .duals import BoxedFunction, Dual
from .dynamics import SystemModel, step
from .fista import FistaResult, fista_solve
from .focp import ConstraintSet, lagrangian_gradient, no_constraints
from .lbfgs import LineSearchStagnation, lbfgs_minimize
from .segments import Dataset, TrajectorySegment
from .utils import ordered_map

log = logging.getLogger("ttdioc.kktioc")

EPS_ACTIVE = 1e-6


@dataclass
class MultiplierSet:
    """Per-segment inequality and terminal multipliers."""

    lam: list  # per segment: (N, P) array or None
    ups: list  # per segment: (n,) array

    def __post_init__(self):
        for la in self.lam:
            if la is not None and la.size and float(la.min()) < 0:
                raise ValueError("inequality multipliers must be nonnegative")


@dataclass(frozen=True)
class SegmentBasis:
    """Fixed-per-segment gradient data entering the stationarity residual.

    phi_grad[i, m] is grad_U of feature m at stage i, g_grad likewise for the
    inequality constraints, term_jac is the Jacobian of the terminal state;
    all evaluated on the demonstration, so they never change during
    estimation.
    """

    times: np.ndarray  # (N,)
    phi_grad: np.ndarray  # (N, q, N*m)
    g_val: np.ndarray  # (N, P)
    g_grad: np.ndarray  # (N, P, N*m)
    term_jac: np.ndarray  # (n, N*m)
    active: np.ndarray  # (N, P) bool
    segment: TrajectorySegment

    @property
    def n_rows(self) -> int:
        return self.phi_grad.shape[2]


def segment_basis(
    model: SystemModel,
    features: FeatureVector,
    constraints: ConstraintSet,
    segment: TrajectorySegment,
    eps_active: float = EPS_ACTIVE,
) -> SegmentBasis:
    """One dual rollout through the demonstration collecting all gradients."""
    U = segment.inputs
    N, m = U.shape
    nm = N * m
    P = constraints.count
    q = features.q
    Ud = Dual.seed(U.ravel())
    x = Dual.constant(segment.states[0], nm)
    phi_grad = np.empty((N, q, nm))
    g_val = np.zeros((N, P))
    g_grad = np.zeros((N, P, nm))
    for i in range(N):
        u = Ud[i * m : (i + 1) * m]
        phi = features(x, u)
        phi_grad[i] = phi.dot
        for p, gfun in enumerate(constraints.evaluators):
            gv = gfun(x, u)
            g_val[i, p] = float(gv.val)
            g_grad[i, p] = gv.dot
        x = step(model, x, u)
    times = segment.t_start + model.ts * np.arange(N)
    return SegmentBasis(
        times=times,
        phi_grad=phi_grad,
        g_val=g_val,
        g_grad=g_grad,
        term_jac=np.array(x.dot, dtype=float),
        active=g_val >= -eps_active,
        segment=segment,
    )


def stationarity_residual(
    model: SystemModel,
    features: FeatureVector,
    constraints: ConstraintSet,
    segment: TrajectorySegment,
    theta_source,
    lam,
    upsilon,
) -> np.ndarray:
    """grad_U of the segment Lagrangian at the data, via AD through the rollout."""
    if lam is not None and lam.shape != (segment.horizon, constraints.count):
        raise ValueError("multiplier array shape does not match segment/constraints")
    return lagrangian_gradient(
        model,
        features,
        theta_source,
        constraints,
        segment.states[0],
        segment.states[-1],
        segment.t_start,
        segment.inputs,
        lam,
        upsilon,
    )


@dataclass(frozen=True)
class ZLayout:
    """Index map of the stacked unknown vector.

    Coefficient entries come first (feature-major, the anchored first feature
    column excluded), then active inequality multipliers, then the terminal
    multipliers of every segment.
    """

    e_count: int
    q: int
    n_state: int
    lam_slots: tuple  # ((d, i, p), ...) in stacking order
    n_segments: int

    @property
    def rows_per_coeff(self) -> int:
        return 2 * self.e_count + 1

    @property
    def n_coeff(self) -> int:
        return self.rows_per_coeff * (self.q - 1)

    @property
    def n_lam(self) -> int:
        return len(self.lam_slots)

    @property
    def size(self) -> int:
        return self.n_coeff + self.n_lam + self.n_state * self.n_segments

    def coeff_index(self, j: int, feature: int) -> int:
        if feature < 1:
            raise ValueError("feature 0 is anchored and not part of z")
        return (feature - 1) * self.rows_per_coeff + j

    def ups_slice(self, d: int) -> slice:
        start = self.n_coeff + self.n_lam + d * self.n_state
        return slice(start, start + self.n_state)

    def l1_weights(self, beta: float) -> np.ndarray:
        """beta on time-varying coefficient entries; bias rows unpenalized."""
        w = np.zeros(self.size)
        for feature in range(1, self.q):
            base = (feature - 1) * self.rows_per_coeff
            w[base + 1 : base + self.rows_per_coeff] = beta
        return w

    def nonneg_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.n_coeff : self.n_coeff + self.n_lam] = True
        return mask

    def coefficients(self, z: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        """Full (2E+1, q) coefficient matrix with the anchored first column."""
        A = np.empty((self.rows_per_coeff, self.q))
        A[:, 0] = anchor
        for feature in range(1, self.q):
            base = (feature - 1) * self.rows_per_coeff
            A[:, feature] = z[base : base + self.rows_per_coeff]
        return A

    def multipliers(self, z: np.ndarray, bases: list) -> MultiplierSet:
        lam = []
        for d, basis in enumerate(bases):
            N, P = basis.g_val.shape
            la = np.zeros((N, P)) if P else None
            lam.append(la)
        for k, (d, i, p) in enumerate(self.lam_slots):
            lam[d][i, p] = z[self.n_coeff + k]
        ups = [z[self.ups_slice(d)].copy() for d in range(self.n_segments)]
        return MultiplierSet(lam=lam, ups=ups)


@dataclass(frozen=True)
class NormalSystem:
    """Stacked residual r(z) = J z + r0 and its quadratic form."""

    J: np.ndarray
    r0: np.ndarray
    layout: ZLayout
    freqs: tuple
    anchor: np.ndarray

    @property
    def Q(self) -> np.ndarray:
        return self.J.T @ self.J

    @property
    def c(self) -> np.ndarray:
        return self.J.T @ self.r0

    def residual_sq(self, z: np.ndarray) -> float:
        r = self.J @ z + self.r0
        return float(r @ r)


def _omega_block(basis: SegmentBasis, freqs) -> np.ndarray:
    """T[j, m, :] = sum_i Omega_j(t_i) phi_grad[i, m, :] for one segment."""
    O = omega_table(freqs, basis.times)
    return np.einsum("ij,imk->jmk", O, basis.phi_grad)


def build_normal_system(
    bases: list,
    freqs,
    anchor,
    layout: Optional[ZLayout] = None,
) -> NormalSystem:
    """Stack per-segment residual rows over the unknown vector z.

    The anchored first feature column contributes the constant part r0;
    rank deficiency is acceptable (the regularizer and anchor resolve it).
    """
    freqs = tuple(float(w) for w in freqs)
    anchor = np.asarray(anchor, dtype=float)
    if not bases:
        raise ValueError("no training segments (empty normal system)")
    q = bases[0].phi_grad.shape[1]
    n_state = bases[0].term_jac.shape[0]
    if anchor.shape != (2 * len(freqs) + 1,):
        raise ValueError("anchor length must be 2E+1")
    if layout is None:
        slots = []
        for d, basis in enumerate(bases):
            N, P = basis.g_val.shape
            for i in range(N):
                for p in range(P):
                    if basis.active[i, p]:
                        slots.append((d, i, p))
        layout = ZLayout(
            e_count=len(freqs),
            q=q,
            n_state=n_state,
            lam_slots=tuple(slots),
            n_segments=len(bases),
        )
    total_rows = sum(b.n_rows for b in bases)
    J = np.zeros((total_rows, layout.size))
    r0 = np.zeros(total_rows)
    row = 0
    lam_col = {slot: layout.n_coeff + k for k, slot in enumerate(layout.lam_slots)}
    for d, basis in enumerate(bases):
        nm = basis.n_rows
        rows = slice(row, row + nm)
        T = _omega_block(basis, freqs)  # (2E+1, q, nm)
        J[rows, : layout.n_coeff] = (
            T[:, 1:, :].transpose(2, 1, 0).reshape(nm, layout.n_coeff)
        )
        r0[rows] = np.einsum("j,jk->k", anchor, T[:, 0, :])
        for (dd, i, p), col in lam_col.items():
            if dd == d:
                J[rows, col] = basis.g_grad[i, p]
        J[rows, layout.ups_slice(d)] = basis.term_jac.T
        row += nm
    return NormalSystem(J=J, r0=r0, layout=layout, freqs=freqs, anchor=anchor)


@dataclass(frozen=True)
class TtdConfig:
    """Settings of the trig-feature estimator and its line searches."""

    e_count: int = 2
    omega_start: float = 0.5
    omega_stop: float = 2.5
    omega_step: float = 2.0
    beta_start: float = 0.04
    beta_stop: float = 0.06
    beta_step: float = 0.01
    anchor: tuple = ()  # empty -> (anchor_value, 0, ..., 0)
    anchor_value: float = 7.0
    nonneg_theta: bool = True
    fista_tol: float = 1e-10
    fista_max_iter: int = 40000
    guard_max_iter: int = 2000
    refine_rounds: int = 50
    refine_tol: float = 1e-8
    wstep_tol: float = 1e-9
    rescan_points: int = 96
    rescan_lo: float = 0.05
    rescan_hi: float = 12.0
    max_rescans: int = 4
    rescan_floor: float = 1e-9
    threads: int = 1

    def anchor_vector(self) -> np.ndarray:
        if self.anchor:
            v = np.asarray(self.anchor, dtype=float)
            if v.shape != (2 * self.e_count + 1,):
                raise ValueError("anchor length must be 2E+1")
            if not v.any():
                raise ValueError("anchor must be nonzero")
            return v
        v = np.zeros(2 * self.e_count + 1)
        v[0] = self.anchor_value
        if not v.any():
            raise ValueError("anchor must be nonzero")
        return v

    def beta_grid(self) -> list:
        return _arith_grid(self.beta_start, self.beta_stop, self.beta_step)


def _arith_grid(start: float, stop: float, step: float) -> list:
    if stop < start:
        raise ValueError("grid stop must not precede start")
    if step <= 0:
        return [start]
    out = []
    k = 0
    while True:
        v = start + k * step
        if v > stop + 1e-12:
            break
        out.append(v)
        k += 1
    return out


def initial_frequency_tuples(config: TtdConfig) -> list:
    """Sorted distinct starting tuples from the grid (frequencies exchangeable).

    When the grid has fewer distinct values than E, repeats are allowed and
    separated by +0.01 k so every tuple is strictly increasing.
    """
    from itertools import combinations, combinations_with_replacement

    e = config.e_count
    if e == 0:
        return [()]
    values = _arith_grid(config.omega_start, config.omega_stop, config.omega_step)
    tuples = sorted(set(combinations(sorted(values), e)))
    if not tuples:
        tuples = sorted(set(combinations_with_replacement(sorted(values), e)))
        spread = []
        for tup in tuples:
            out = []
            for w in tup:
                while out and w <= out[-1]:
                    w = out[-1] + 0.01
                out.append(w)
            spread.append(tuple(out))
        tuples = sorted(set(spread))
    return tuples


@dataclass
class InnerSolution:
    z: np.ndarray
    coeffs: np.ndarray  # (2E+1, q), anchored column injected
    multipliers: MultiplierSet
    residual_sq: float  # sum over segments of |grad_U L|^2
    penalized: float  # residual_sq + beta * |penalized entries|
    converged: bool
    guard_state: Optional[dict] = None


def solve_inner(
    bases: list,
    freqs,
    beta: float,
    config: TtdConfig,
    warm_z=None,
    warm_guard=None,
) -> InnerSolution:
    """Convex solve in (coefficients, multipliers) at fixed frequencies.

    Column equilibration keeps FISTA well-conditioned (terminal-Jacobian
    columns can dwarf the coefficient columns on unstable systems); the
    optional nonnegativity guard on theta(t_i) is enforced by an escalating
    active-set penalty on violating evaluations.
    """
    anchor = config.anchor_vector()
    ns = build_normal_system(bases, freqs, anchor)
    layout = ns.layout
    w = layout.l1_weights(beta)
    nonneg = layout.nonneg_mask()

    guard_state = None
    if config.nonneg_theta:
        z, result, guard_state = _nonneg_guard_solve(
            ns, bases, freqs, anchor, layout, w, nonneg, config, warm_z, warm_guard
        )
    else:
        z, result = _solve_penalized(ns.J, ns.r0, w, nonneg, config, warm_z)
    if not result.converged:
        log.debug(
            "inner solve hit the iteration cap (fp residual %.2e)",
            result.fp_residual,
        )
    A = layout.coefficients(z, anchor)
    resid = ns.residual_sq(z)
    pen = resid + float(w @ np.abs(z))
    return InnerSolution(
        z=z,
        coeffs=A,
        multipliers=layout.multipliers(z, bases),
        residual_sq=resid,
        penalized=pen,
        converged=result.converged,
        guard_state=guard_state,
    )


def _active_set_polish(Q, c, w, nonneg, z0, max_updates=80):
    """Finish a composite quadratic solve exactly on the active set.

    Alternates support-restricted linear solves with single add/drop support
    updates (classic lasso active-set iteration). Conditioning-robust where
    a proximal method crawls; returns the best iterate by objective.
    """

    def objective(z):
        return 0.5 * float(z @ (Q @ z)) + float(c @ z) + float(w @ np.abs(z))

    z = np.array(z0, dtype=float)
    n = z.size
    tol = 1e-12 * max(1.0, float(np.max(np.abs(c))) if n else 1.0)
    best = z.copy()
    best_obj = objective(z)
    signs = np.sign(z)
    for _ in range(max_updates):
        support = signs != 0.0
        if support.any():
            idx = np.flatnonzero(support)
            A = Q[np.ix_(idx, idx)]
            rhs = -(c[idx] + w[idx] * signs[idx])
            zs, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            flipped = zs * signs[idx] < 0.0
            z_new = np.zeros(n)
            z_new[idx] = zs
            if flipped.any():
                # step to the first sign crossing and drop that coordinate
                with np.errstate(divide="ignore", invalid="ignore"):
                    alphas = np.where(
                        np.abs(z[idx] - zs) > 0.0,
                        z[idx] / (z[idx] - zs),
                        np.inf,
                    )
                alphas = np.where(flipped, alphas, np.inf)
                k = int(np.argmin(alphas))
                a = max(0.0, min(1.0, float(alphas[k])))
                z = z + a * (z_new - z)
                z[idx[k]] = 0.0
                signs[idx[k]] = 0.0
                continue
            z = z_new
        g = Q @ z + c
        worst, worst_j, worst_sign = 0.0, -1, 0.0
        for j in range(n):
            if signs[j] != 0.0:
                continue
            if w[j] > 0.0:
                excess = abs(g[j]) - w[j]
                if excess > worst + tol:
                    worst, worst_j, worst_sign = excess, j, -np.sign(g[j])
            elif nonneg[j]:
                if -g[j] > worst + tol:
                    worst, worst_j, worst_sign = -g[j], j, 1.0
            else:
                if abs(g[j]) > worst + tol:
                    worst, worst_j, worst_sign = abs(g[j]), j, -np.sign(g[j])
        obj = objective(z)
        if obj < best_obj:
            best_obj, best = obj, z.copy()
        if worst_j < 0:
            break
        signs[worst_j] = worst_sign
    return best


class _QpFactors:
    """Prefactored pieces of min 0.5 z'Qz + c'z + w.|z| (+ nonneg flags).

    The diagonal scaling, the free/penalized split, and the Cholesky of the
    free block depend only on Q, so one preparation serves many right-hand
    sides (the guard's splitting iteration exploits this heavily).
    """

    def __init__(self, Q, w, nonneg):
        n = Q.shape[0]
        d = np.sqrt(np.maximum(np.diag(Q), 1e-12))
        self.d = d
        self.Qs = Q / d[:, None] / d[None, :]
        self.ws = w / d
        self.nonneg = nonneg
        pen = (self.ws > 0) | nonneg
        if not pen.any():
            pen = np.ones(n, dtype=bool)
        free = ~pen
        self.chol = None
        if free.any():
            Qff = self.Qs[np.ix_(free, free)]
            jitter = 1e-13
            for _ in range(6):
                try:
                    self.chol = np.linalg.cholesky(
                        Qff + jitter * np.eye(Qff.shape[0])
                    )
                    break
                except np.linalg.LinAlgError:
                    self.chol = None
                    jitter *= 100.0
            if self.chol is None:
                free = np.zeros(n, dtype=bool)
                pen = np.ones(n, dtype=bool)
        self.pen = pen
        self.free = free
        if self.chol is not None and free.any():
            Qfp = self.Qs[np.ix_(free, pen)]
            self.Qfp = Qfp
            self.QinvQfp = self._ff_solve(Qfp)
            self.Qt = self.Qs[np.ix_(pen, pen)] - Qfp.T @ self.QinvQfp
        else:
            self.Qfp = None
            self.QinvQfp = None
            self.Qt = self.Qs[np.ix_(pen, pen)]

    def _ff_solve(self, rhs):
        return np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, rhs))

    def solve(self, c, config: TtdConfig, warm_z=None, max_iter=None):
        """Solve for one linear term; warm_z in natural coordinates."""
        cs = c / self.d
        pen, free = self.pen, self.free
        if self.chol is not None and free.any():
            Qinvcf = self._ff_solve(cs[free])
            ct = cs[pen] - self.Qfp.T @ Qinvcf
        else:
            Qinvcf = None
            ct = cs[pen]
        z0 = None if warm_z is None else (warm_z * self.d)[pen]
        result = fista_solve(
            self.Qt,
            ct,
            l1_weights=self.ws[pen],
            nonneg_mask=self.nonneg[pen],
            tol=config.fista_tol,
            max_iter=max_iter if max_iter is not None else config.fista_max_iter,
            z0=z0,
        )
        zp = result.z
        if (self.ws[pen] > 0).any() or self.nonneg[pen].any():
            zp = _active_set_polish(self.Qt, ct, self.ws[pen], self.nonneg[pen], zp)
        zs = np.zeros(c.size)
        zs[pen] = zp
        if self.chol is not None and free.any():
            zs[free] = -(Qinvcf + self.QinvQfp @ zp)
        return zs / self.d, result


def _solve_penalized(J, r0, w, nonneg, config: TtdConfig, warm_z=None):
    """min |Jz + r0|^2 + w.|z| with nonnegativity on flagged entries.

    Columns are equilibrated to unit norm first (terminal-Jacobian columns
    can dwarf the coefficient columns by orders of magnitude on unstable
    systems); the block without l1 or sign constraints is eliminated exactly
    through the Schur complement, so FISTA only iterates on the small
    constrained block, warm-started from the unpenalized least-squares
    solution and finished by an exact active-set polish.
    """
    col = np.linalg.norm(J, axis=0)
    col = np.where(col > 1e-12, col, 1.0)
    Je = J / col  # z = ze / col, so w_j |z_j| = (w_j / col_j) |ze_j|
    we = w / col
    if warm_z is None:
        # modest rcond keeps near-null directions out of the warm start
        ze, *_ = np.linalg.lstsq(Je, -r0, rcond=1e-10)
        if nonneg.any():
            ze[nonneg] = np.maximum(ze[nonneg], 0.0)
    else:
        ze = warm_z * col
    Q = 2.0 * (Je.T @ Je)
    c = 2.0 * (Je.T @ r0)
    prep = _QpFactors(Q, we, nonneg)
    ze_out, result = prep.solve(c, config, warm_z=ze)
    return ze_out / col, result


def _cone_rows(bases, freqs, layout) -> np.ndarray:
    """Rows C with theta_feature(t) = C z for every non-anchored feature.

    Overlapping segments share stage times, so rows are built on the unique
    times only; the anchored feature's profile is fixed by the anchor and
    needs no rows.
    """
    times = np.unique(np.concatenate([b.times for b in bases]).round(9))
    O = omega_table(freqs, times)
    n_t = O.shape[0]
    width = layout.rows_per_coeff
    C = np.zeros((n_t * (layout.q - 1), layout.size))
    for feature in range(1, layout.q):
        base = (feature - 1) * width
        rows = slice((feature - 1) * n_t, feature * n_t)
        C[rows, base : base + width] = O
    return C


def _nonneg_guard_solve(
    ns, bases, freqs, anchor, layout, w, nonneg, config, warm_z, warm_state=None
):
    """Inner solve with theta(t_i) >= 0 enforced by slack splitting.

    The cone rows C z >= 0 get explicit slacks s >= 0 and a scaled-dual
    splitting iteration: a prefactored quadratic solve in z, the slack
    clamp, then the dual update. Each iteration costs back-substitutions
    plus a tiny proximal solve, so the loop can run to genuine convergence.
    """
    J, r0 = ns.J, ns.r0
    col = np.linalg.norm(J, axis=0)
    col = np.where(col > 1e-12, col, 1.0)
    Je = J / col
    we = w / col
    C = _cone_rows(bases, freqs, layout) / col
    if warm_state is not None and warm_state["u"].size == C.shape[0]:
        # mid-search call: skip the unguarded pre-solve, reuse the dual state
        ze = warm_z * col if warm_z is not None else np.zeros(J.shape[1])
        result = None
        rho = warm_state["rho"]
        s = warm_state["s"].copy()
        u = warm_state["u"].copy()
    else:
        z0, result = _solve_penalized(J, r0, w, nonneg, config, warm_z)
        vals0 = C @ (z0 * col)
        if float(vals0.min()) >= -1e-9 and warm_state is None:
            return z0, result, None
        ze = z0 * col
        rho = 1.0
        s = np.maximum(0.0, C @ ze)
        u = np.zeros(C.shape[0])  # scaled dual
    Qbase = 2.0 * (Je.T @ Je)
    c0 = 2.0 * (Je.T @ r0)
    CtC = C.T @ C
    best = None  # (objective, ze, result)
    max_iter = config.guard_max_iter
    prep = _QpFactors(Qbase + rho * CtC, we, nonneg)
    stall = 0
    for it in range(max_iter):
        c = c0 + rho * (C.T @ (u - s))
        # the active-set polish inside the prepared solve is exact; a short
        # proximal pass just seeds its support
        ze, result = prep.solve(c, config, warm_z=ze, max_iter=25)
        vals = C @ ze
        s_new = np.maximum(0.0, vals + u)
        r_primal = vals - s_new
        r_dual = rho * float(np.linalg.norm(C.T @ (s_new - s)))
        u = u + r_primal
        s = s_new
        viol = max(0.0, -float(vals.min()))
        if viol <= 1e-7:
            r = Je @ ze + r0
            obj = float(r @ r) + float(we @ np.abs(ze))
            if best is None or obj < best[0]:
                best = (obj, ze.copy(), result)
        pr = float(np.linalg.norm(r_primal))
        if pr <= 1e-9 and viol <= 1e-8:
            break
        if pr > 10.0 * r_dual and it - stall > 10:
            rho *= 2.0
            u /= 2.0
            prep = _QpFactors(Qbase + rho * CtC, we, nonneg)
            stall = it
        elif r_dual > 10.0 * pr and rho > 1e-4 and it - stall > 10:
            rho /= 2.0
            u *= 2.0
            prep = _QpFactors(Qbase + rho * CtC, we, nonneg)
            stall = it
    if best is not None:
        _, ze, result = best
    if result is None:
        result = FistaResult(z=ze, converged=True, iterations=0, fp_residual=0.0)
    return ze / col, result, {"rho": rho, "s": s, "u": u}



def _wstep_data(bases, A):
    """Per-segment contraction S[i, j, :] = sum_m A[j, m] phi_grad[i, m, :]."""
    return [np.einsum("jm,imk->ijk", A, basis.phi_grad) for basis in bases]


def _fixed_parts(bases, mult: MultiplierSet):
    out = []
    for d, basis in enumerate(bases):
        fixed = basis.term_jac.T @ mult.ups[d]
        la = mult.lam[d]
        if la is not None and la.size:
            idx = np.argwhere(la != 0.0)
            for i, p in idx:
                fixed = fixed + la[i, p] * basis.g_grad[i, p]
        out.append(fixed)
    return out


def _wstep_objective(bases, S_list, fixed_list, e_count) -> BoxedFunction:
    """Squared residual as a function of the frequency vector, coefficients fixed.

    The gradient is analytic: only the trig basis rows depend on W, and
    d cos(w t)/dw = -t sin(w t), d sin(w t)/dw = t cos(w t).
    """

    def evaluator(wvec):
        total = 0.0
        grad = np.zeros(e_count)
        for basis, S, fixed in zip(bases, S_list, fixed_list):
            t = basis.times
            O = np.empty((t.size, 2 * e_count + 1))
            O[:, 0] = 1.0
            wt = np.outer(t, wvec)
            O[:, 1::2] = np.cos(wt)
            O[:, 2::2] = np.sin(wt)
            r = np.einsum("ij,ijk->k", O, S) + fixed
            total += float(r @ r)
            Sr = S @ r  # (N, 2E+1)
            for e in range(e_count):
                dcol_cos = -t * np.sin(wt[:, e])
                dcol_sin = t * np.cos(wt[:, e])
                grad[e] += 2.0 * float(
                    dcol_cos @ Sr[:, 2 * e + 1] + dcol_sin @ Sr[:, 2 * e + 2]
                )
        return total, grad

    return BoxedFunction(e_count, evaluator)


def _canonicalize(wvec: np.ndarray, A: np.ndarray):
    """Sort frequencies, fold signs (sin rows flip), enforce strict increase."""
    w = np.array(wvec, dtype=float)
    A = A.copy()
    for e in range(w.size):
        if w[e] < 0:
            w[e] = -w[e]
            A[2 * e + 2, :] *= -1.0
    order = np.argsort(w, kind="stable")
    w = w[order]
    rows = [0]
    for e in order:
        rows.extend([2 * e + 1, 2 * e + 2])
    A = A[rows, :]
    for e in range(1, w.size):
        if w[e] <= w[e - 1]:
            w[e] = w[e - 1] + 1e-9
    return w, A


@dataclass
class RefineResult:
    freqs: tuple
    coeffs: np.ndarray
    multipliers: MultiplierSet
    residual_sq: float
    penalized: float
    rounds: int
    trace: list  # penalized objective after each round


def _varpro_objective(bases, beta, config, holder) -> BoxedFunction:
    """Frequency objective scored through the convex inner solve.

    For each trial W the inner problem is re-solved (warm-started), and the
    gradient is the partial derivative of the squared residual at the inner
    optimum: the envelope theorem makes re-differentiating the inner
    minimizer unnecessary, and the l1 term does not depend on W.
    """
    e_count = config.e_count

    def evaluator(wvec):
        inner = solve_inner(
            bases,
            tuple(float(v) for v in wvec),
            beta,
            config,
            warm_z=holder.get("z"),
            warm_guard=holder.get("guard"),
        )
        holder["z"] = inner.z
        holder["guard"] = inner.guard_state
        if inner.penalized < holder["best"][1].penalized:
            holder["best"] = (np.array(wvec, dtype=float), inner)
        S_list = _wstep_data(bases, inner.coeffs)
        fixed_list = _fixed_parts(bases, inner.multipliers)
        _, grad = _wstep_objective(bases, S_list, fixed_list, e_count)(
            np.asarray(wvec, dtype=float)
        )
        return inner.penalized, grad

    return BoxedFunction(e_count, evaluator)


def refine_frequencies(
    bases: list,
    w_init,
    beta: float,
    config: TtdConfig,
) -> RefineResult:
    """Block-coordinate descent over frequencies and the convex unknowns.

    Each round runs L-BFGS over W with every trial scored through the convex
    inner solve (coefficients re-fit per trial, gradient analytic at the
    inner optimum). When a round stalls while the residual is still above
    the attainable floor, each tone is re-seeded by an exact scan over a
    candidate grid, accepting only strict improvements; plain local descent
    cannot cross correlation side lobes otherwise. Rounds are monotone in
    the penalized objective.
    """
    w = np.array([float(v) for v in w_init])
    e_count = w.size
    if e_count != config.e_count:
        raise ValueError("initial tuple length must equal the basis count")
    # scoring solves run on a lighter budget; the nonnegativity guard stays
    # on (without it, sign-indefinite fits through weakly excited features
    # can outscore every admissible model and poison the search)
    score_cfg = replace(
        config,
        fista_tol=max(config.fista_tol, 1e-8),
        fista_max_iter=min(config.fista_max_iter, 4000),
        guard_max_iter=min(config.guard_max_iter, 40),
    )
    inner = solve_inner(bases, tuple(w), beta, config)
    if e_count == 0:
        return RefineResult(
            freqs=(),
            coeffs=inner.coeffs,
            multipliers=inner.multipliers,
            residual_sq=inner.residual_sq,
            penalized=inner.penalized,
            rounds=0,
            trace=[inner.penalized],
        )
    trace = [inner.penalized]
    rescans = 0
    rounds = 0
    for rounds in range(1, config.refine_rounds + 1):
        prev = inner.penalized
        holder = {
            "z": inner.z,
            "guard": inner.guard_state,
            "best": (w.copy(), inner),
        }
        obj = _varpro_objective(bases, beta, score_cfg, holder)
        try:
            lbfgs_minimize(obj, w, tol_grad=config.wstep_tol, max_iter=20)
        except LineSearchStagnation:
            pass
        w_best, inner_best = holder["best"]
        if inner_best.penalized < inner.penalized:
            w, inner = w_best, inner_best
        trace.append(inner.penalized)
        improvement = (prev - inner.penalized) / max(prev, 1e-300)
        # a round that does not at least halve the objective is treated as
        # stalled: local descent cannot cross side lobes, so spend a rescan
        if (
            improvement < 0.5
            and rescans < config.max_rescans
            and inner.penalized > config.rescan_floor
        ):
            w, inner, moved = _rescan(bases, w, beta, score_cfg, inner)
            trace.append(inner.penalized)
            rescans += 1
            if moved:
                continue
        if improvement < max(config.refine_tol, 1e-6):
            break
    w, _ = _canonicalize(w, inner.coeffs)
    inner = solve_inner(bases, tuple(w), beta, config, warm_guard=inner.guard_state)
    return RefineResult(
        freqs=tuple(w),
        coeffs=inner.coeffs,
        multipliers=inner.multipliers,
        residual_sq=inner.residual_sq,
        penalized=inner.penalized,
        rounds=rounds,
        trace=trace,
    )


def _rescan(bases, w, beta, config, inner):
    """Exact coordinate re-seeding of each tone over a candidate frequency grid."""
    anchor = config.anchor_vector()
    moved = False
    candidates = np.linspace(config.rescan_lo, config.rescan_hi, config.rescan_points)
    for e in range(w.size):
        best_obj = None
        best_w = None
        for cand in candidates:
            trial = w.copy()
            trial[e] = cand
            trial.sort()
            if trial.size > 1 and float(np.min(np.diff(trial))) < 1e-6:
                continue
            ns = build_normal_system(bases, tuple(trial), anchor)
            z, *_ = np.linalg.lstsq(ns.J, -ns.r0, rcond=None)
            resid = ns.residual_sq(z)
            if best_obj is None or resid < best_obj:
                best_obj = resid
                best_w = trial
        if best_w is None:
            continue
        trial_inner = solve_inner(
            bases, tuple(best_w), beta, config, warm_guard=inner.guard_state
        )
        if trial_inner.penalized < inner.penalized * (1.0 - 1e-12):
            w = best_w
            inner = trial_inner
            moved = True
    return w, inner, moved


@dataclass
class IocSolution:
    """Recovered cost model with its multipliers and selection diagnostics."""

    model: TrigTimeModel
    multipliers: MultiplierSet
    residual_sq: float
    selected_beta: float
    trace: list  # (beta, training residual, validation error) triples
    anchor: np.ndarray
    config: Optional[TtdConfig] = None

    def save(self, path) -> None:
        doc = {
            "schema": "ttdioc.solution.v1",
            "frequencies": list(self.model.freqs),
            "coefficients": self.model.coeffs.tolist(),
            "anchor": np.asarray(self.anchor, dtype=float).tolist(),
            "selected_beta": self.selected_beta,
            "residual_sq": self.residual_sq,
            "trace": [list(t) for t in self.trace],
            "config": _config_echo(self.config),
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "IocSolution":
        doc = json.loads(Path(path).read_text())
        if doc.get("schema") != "ttdioc.solution.v1":
            raise ValueError(f"unrecognized solution schema in {path}")
        model = TrigTimeModel(
            tuple(doc["frequencies"]), np.array(doc["coefficients"], dtype=float)
        )
        return cls(
            model=model,
            multipliers=MultiplierSet(lam=[], ups=[]),
            residual_sq=float(doc["residual_sq"]),
            selected_beta=float(doc["selected_beta"]),
            trace=[tuple(t) for t in doc["trace"]],
            anchor=np.array(doc["anchor"], dtype=float),
            config=None,
        )


def _config_echo(config: Optional[TtdConfig]) -> dict:
    if config is None:
        return {}
    out = {}
    for name in config.__dataclass_fields__:
        value = getattr(config, name)
        out[name] = list(value) if isinstance(value, tuple) else value
    return out


def _default_context(dataset: Dataset):
    model = SystemModel(dataset.system, ts=dataset.ts)
    return model, squared_features(model)


def prepare_bases(
    dataset: Dataset,
    model: Optional[SystemModel] = None,
    features: Optional[FeatureVector] = None,
    constraints: Optional[ConstraintSet] = None,
) -> list:
    if model is None or features is None:
        model, features = _default_context(dataset)
    constraints = constraints if constraints is not None else no_constraints()
    return [segment_basis(model, features, constraints, s) for s in dataset.train]


def sp_ioc(
    dataset: Dataset,
    anchor: float,
    model: Optional[SystemModel] = None,
    features: Optional[FeatureVector] = None,
    constraints: Optional[ConstraintSet] = None,
    config: Optional[TtdConfig] = None,
) -> IocSolution:
    """Constant-weight estimation: one convex solve, first weight pinned."""
    if anchor == 0:
        raise ValueError("anchor must be nonzero")
    if not dataset.train:
        raise ValueError("empty training set")
    cfg = replace(
        config if config is not None else TtdConfig(),
        e_count=0,
        anchor=(float(anchor),),
    )
    bases = prepare_bases(dataset, model, features, constraints)
    inner = solve_inner(bases, (), 0.0, cfg)
    return IocSolution(
        model=TrigTimeModel((), inner.coeffs),
        multipliers=inner.multipliers,
        residual_sq=inner.residual_sq,
        selected_beta=0.0,
        trace=[(0.0, inner.residual_sq, np.nan)],
        anchor=cfg.anchor_vector(),
        config=cfg,
    )


def _refine_task(args):
    bases, w0, beta, config = args
    return refine_frequencies(bases, w0, beta, config)


def ttd_ioc(
    dataset: Dataset,
    config: TtdConfig,
    model: Optional[SystemModel] = None,
    features: Optional[FeatureVector] = None,
    constraints: Optional[ConstraintSet] = None,
    validator=None,
) -> IocSolution:
    """Regularization-weight line search with model selection by validation.

    For every beta on the arithmetic grid, frequency refinement is started
    from every grid tuple; the candidate with the lowest training residual
    (ties: lexicographically smallest W) is validated by re-solving every
    validation segment with the estimate fixed. The model with the lowest
    validation error wins; re-solve failures mark that beta with +inf.
    """
    if not dataset.train or not dataset.validation:
        raise ValueError("dataset must provide both training and validation splits")
    if model is None or features is None:
        model, features = _default_context(dataset)
    constraints = constraints if constraints is not None else no_constraints()
    if validator is None:
        from .experiments import revalidate

        def validator(theta_source):
            _, report = revalidate(theta_source, dataset, model, features, constraints)
            return report.e_v

    bases = prepare_bases(dataset, model, features, constraints)
    starts = initial_frequency_tuples(config)
    betas = config.beta_grid()
    trace = []
    best = None
    best_e = np.inf
    for beta in betas:
        tasks = [(bases, w0, beta, config) for w0 in starts]
        candidates = ordered_map(_refine_task, tasks, config.threads)
        chosen = None
        for cand in candidates:
            if chosen is None or cand.residual_sq < chosen.residual_sq:
                chosen = cand
        trig = TrigTimeModel(chosen.freqs, chosen.coeffs)
        try:
            e_beta = float(validator(trig))
        except Exception as exc:  # re-solve failures mark the cell, not abort
            log.warning("validation failed at beta=%g: %s", beta, exc)
            e_beta = np.inf
        trace.append((beta, chosen.residual_sq, e_beta))
        log.info(
            "beta=%g: residual=%.3e, e_v=%.3e, W=%s",
            beta,
            chosen.residual_sq,
            e_beta,
            np.round(chosen.freqs, 4),
        )
        if e_beta < best_e:
            best_e = e_beta
            best = chosen
    if best is None:
        raise RuntimeError("no candidate produced a finite validation error")
    return IocSolution(
        model=TrigTimeModel(best.freqs, best.coeffs),
        multipliers=best.multipliers,
        residual_sq=best.residual_sq,
        selected_beta=[b for b, _, e in trace if e == best_e][0],
        trace=trace,
        anchor=config.anchor_vector(),
        config=config,
    )
