"""Forward trajectory optimization by single shooting.

``solve_forward`` minimizes the summed stage cost theta(t) . phi(x, u) over
the stacked input sequence, with the dynamics eliminated through the rollout
operator, a terminal equality constraint, and optional smooth inequality
constraints. The terminal constraint is handled by an augmented Lagrangian
(multiplier estimates come out as a byproduct); inequalities use shifted
quadratic penalties, and the inner smooth subproblems are solved by L-BFGS
with gradients from forward-mode AD through the rollout.

For the open-loop-unstable pendulum pair the decision vector is optionally
prestabilized, u_i = w_i - K x_i with a fixed gain K from a Riccati
iteration at the upright equilibrium. This keeps single shooting
well-conditioned over multi-second horizons; reported inputs, states, and
multipliers are always in the original variables.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import duals as dm
from .costmodel import FeatureVector, theta_table
from .duals import BoxedFunction, Dual
from .dynamics import (
    DivergenceError,
    SystemModel,
    discrete_linearization,
    rollout,
    step,
)
from .lbfgs import LineSearchStagnation, lbfgs_minimize
from .segments import TrajectorySegment

log = logging.getLogger("ttdioc.focp")


@dataclass(frozen=True)
class ConstraintSet:
    """Differentiable per-stage inequality constraints g_p(x, u) <= 0."""

    evaluators: tuple = ()

    @property
    def count(self) -> int:
        return len(self.evaluators)


def no_constraints() -> ConstraintSet:
    return ConstraintSet(())


def input_box(model: SystemModel, u_max: float) -> ConstraintSet:
    """|u_j| <= u_max for every input channel (2m constraints)."""

    def upper(j):
        return lambda x, u: u[j] - u_max

    def lower(j):
        return lambda x, u: -u[j] - u_max

    evs = []
    for j in range(model.m):
        evs.append(upper(j))
        evs.append(lower(j))
    return ConstraintSet(tuple(evs))


@dataclass(frozen=True)
class FocpProblem:
    model: SystemModel
    features: FeatureVector
    theta: object  # anything with .theta_at(t)
    constraints: ConstraintSet
    x0: np.ndarray
    xN: np.ndarray
    t0: float
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "xN", np.asarray(self.xN, dtype=float))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        n = self.model.n
        if self.x0.shape != (n,) or self.xN.shape != (n,):
            raise ValueError("endpoint dimensions do not match the model")


@dataclass
class FocpSolution:
    inputs: np.ndarray  # (N, m)
    states: np.ndarray  # (N+1, n)
    cost: float
    terminal_residual: float
    upsilon: np.ndarray  # (n,)
    lam: np.ndarray  # (N, P)
    active: np.ndarray  # (N, P) bool
    converged: bool
    outer_iters: int
    grad_norm: float
    stationarity: float  # ||grad_U L|| at (U, upsilon, lam)


class InfeasibleError(RuntimeError):
    """Terminal constraint could not be met; carries the best iterate."""

    def __init__(self, msg: str, best: FocpSolution):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class SolverOptions:
    tol_term: float = 1e-9
    tol_grad: float = 1e-9
    max_outer: int = 50
    max_inner: int = 5000
    rho0: float = 10.0
    rho_growth: float = 5.0
    rho_max: float = 1e8
    eps_active: float = 1e-6
    stabilize: bool = False
    compute_stationarity: bool = True


def default_solver_options(kind: str) -> SolverOptions:
    if kind == "pendulum2":
        # prestabilized decision variables; tighter inner tolerance because
        # open-loop stationarity degrades by the horizon's growth factor
        return SolverOptions(stabilize=True, tol_grad=1e-12)
    return SolverOptions()


@lru_cache(maxsize=None)
def stabilizing_gain(model: SystemModel) -> np.ndarray:
    """Feedback gain from a Riccati fixed-point on the origin linearization."""
    A, B = discrete_linearization(model)
    n, m = model.n, model.m
    Q = np.eye(n)
    R = np.eye(m)
    P = Q.copy()
    for _ in range(100000):
        S = R + B.T @ P @ B
        K = np.linalg.solve(S, B.T @ P @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
        if np.max(np.abs(P_next - P)) < 1e-12:
            P = P_next
            break
        P = P_next
    S = R + B.T @ P @ B
    return np.linalg.solve(S, B.T @ P @ A)


def _realize(problem: FocpProblem, w: np.ndarray, gain: Optional[np.ndarray]):
    """Inputs and states realized from the decision vector."""
    model = problem.model
    N, m = problem.horizon, model.m
    if gain is None:
        U = w.reshape(N, m)
        return U, rollout(model, problem.x0, U)
    U = np.empty((N, m))
    X = np.empty((N + 1, model.n))
    X[0] = problem.x0
    for i in range(N):
        U[i] = w[i * m : (i + 1) * m] - gain @ X[i]
        X[i + 1] = step(model, X[i], U[i])
    return U, X


def _encode_warm_start(problem, U, gain):
    if gain is None:
        return np.asarray(U, dtype=float).ravel().copy()
    X = rollout(problem.model, problem.x0, U)
    w = np.asarray(U, dtype=float) + X[:-1] @ gain.T
    return w.ravel()


def _al_objective(problem, theta_tab, ups, lam, rho, gain) -> BoxedFunction:
    model = problem.model
    feats = problem.features
    cons = problem.constraints.evaluators
    N, m = problem.horizon, model.m
    nm = N * m
    x0 = problem.x0
    xN = problem.xN

    def fn(wd: Dual):
        x = Dual.constant(x0, nm)
        total = None
        for i in range(N):
            u = wd[i * m : (i + 1) * m]
            if gain is not None:
                u = u - dm.matvec(gain, x)
            term = dm.dot(feats(x, u), theta_tab[i])
            total = term if total is None else total + term
            for p, gfun in enumerate(cons):
                gv = gfun(x, u)
                shifted = gv + lam[i, p] / rho
                if dm.value(shifted) > 0:
                    total = total + (shifted * shifted) * (rho / 2.0)
            x = step(model, x, u)
        h = x - xN
        return total + dm.dot(h, ups) + dm.dot(h, h) * (rho / 2.0)

    def evaluator(wflat):
        try:
            out = fn(Dual.seed(wflat))
        except DivergenceError:
            return np.inf, np.zeros(nm)
        v = float(out.val)
        if not np.isfinite(v) or not np.all(np.isfinite(out.dot)):
            return np.inf, np.zeros(nm)
        return v, out.dot

    return BoxedFunction(nm, evaluator)


def _constraint_values(problem, U, X) -> np.ndarray:
    cons = problem.constraints.evaluators
    N = problem.horizon
    g = np.zeros((N, len(cons)))
    for i in range(N):
        for p, gfun in enumerate(cons):
            g[i, p] = float(dm.value(gfun(X[i], U[i])))
    return g


def _stage_cost_total(problem, theta_tab, U, X) -> float:
    total = 0.0
    for i in range(problem.horizon):
        total += float(dm.dot(problem.features(X[i], U[i]), theta_tab[i]))
    return total


def lagrangian_gradient(
    model: SystemModel,
    features: FeatureVector,
    theta_source,
    constraints: ConstraintSet,
    x0,
    xN,
    t0: float,
    U,
    lam,
    upsilon,
) -> np.ndarray:
    """grad_U of the Lagrangian at the given inputs and multipliers (via AD).

    The Lagrangian is the summed stage cost plus lam . g per stage plus
    upsilon . (F_N - xN); its gradient at optimal data with the right
    multipliers is the estimation residual consumed downstream.
    """
    U = np.asarray(U, dtype=float)
    N, m = U.shape
    theta_tab = theta_table(theta_source, t0, model.ts, N)
    Ud = Dual.seed(U.ravel())
    x = Dual.constant(np.asarray(x0, dtype=float), N * m)
    total = None
    for i in range(N):
        u = Ud[i * m : (i + 1) * m]
        term = dm.dot(features(x, u), theta_tab[i])
        if lam is not None:
            for p, gfun in enumerate(constraints.evaluators):
                if lam[i, p] != 0.0:
                    term = term + gfun(x, u) * lam[i, p]
        total = term if total is None else total + term
        x = step(model, x, u)
    h = x - np.asarray(xN, dtype=float)
    total = total + dm.dot(h, np.asarray(upsilon, dtype=float))
    return np.array(total.dot, dtype=float)


def solve_forward(
    problem: FocpProblem,
    options: Optional[SolverOptions] = None,
    warm_start=None,
    warm_upsilon=None,
    warm_lam=None,
) -> FocpSolution:
    """Solve the terminal-constrained problem; raises InfeasibleError on failure.

    Returns the optimizer together with recovered multipliers: upsilon from
    the augmented-Lagrangian estimate, lam from the shifted penalties (zeroed
    outside the active set).
    """
    opts = options if options is not None else default_solver_options(problem.model.kind)
    model = problem.model
    N, m, n = problem.horizon, model.m, model.n
    P = problem.constraints.count
    theta_tab = theta_table(problem.theta, problem.t0, model.ts, N)
    if np.any(theta_tab < -1e-6):
        raise ValueError("stage weights must be nonnegative over the horizon")
    theta_tab = np.maximum(theta_tab, 0.0)  # forgive penalty-level negatives
    gain = stabilizing_gain(model) if opts.stabilize else None

    if warm_start is not None:
        w = _encode_warm_start(problem, warm_start, gain)
    else:
        w = np.zeros(N * m)

    ups = np.zeros(n) if warm_upsilon is None else np.asarray(warm_upsilon, float)
    lam = np.zeros((N, P)) if warm_lam is None else np.asarray(warm_lam, float)
    rho = opts.rho0
    h_prev = np.inf
    grad_norm = np.inf
    best = None
    for outer in range(1, opts.max_outer + 1):
        if h_prev <= 10.0 * opts.tol_term:
            tol_inner = opts.tol_grad
        else:
            tol_inner = max(opts.tol_grad, min(1e-6, 0.3 * h_prev))
        f = _al_objective(problem, theta_tab, ups, lam, rho, gain)
        try:
            res = lbfgs_minimize(f, w, tol_grad=tol_inner, max_iter=opts.max_inner)
            w, grad_norm = res.x, res.grad_norm
        except LineSearchStagnation as exc:
            w = np.asarray(exc.best_x, dtype=float)
            _, g = f(w)
            grad_norm = float(np.linalg.norm(g))
            log.debug("inner stagnation at outer %d (grad %.3e)", outer, grad_norm)
        U, X = _realize(problem, w, gain)
        h = X[-1] - problem.xN
        hn = float(np.linalg.norm(h))
        gvals = _constraint_values(problem, U, X)
        ups_next = ups + rho * h
        lam_next = np.maximum(0.0, lam + rho * gvals)
        active = gvals >= -opts.eps_active
        lam_rec = np.where(active, lam_next, 0.0)
        sol = FocpSolution(
            inputs=U,
            states=X,
            cost=_stage_cost_total(problem, theta_tab, U, X),
            terminal_residual=hn,
            upsilon=ups_next,
            lam=lam_rec,
            active=active,
            converged=False,
            outer_iters=outer,
            grad_norm=grad_norm,
            stationarity=np.nan,
        )
        if best is None or hn < best.terminal_residual:
            best = sol
        if hn <= opts.tol_term and grad_norm <= opts.tol_grad:
            sol.converged = True
            if opts.compute_stationarity:
                r = lagrangian_gradient(
                    model,
                    problem.features,
                    problem.theta,
                    problem.constraints,
                    problem.x0,
                    problem.xN,
                    problem.t0,
                    U,
                    lam_rec if P else None,
                    ups_next,
                )
                sol.stationarity = float(np.linalg.norm(r))
            log.debug(
                "converged in %d outer iters: |h|=%.2e, |grad|=%.2e",
                outer,
                hn,
                grad_norm,
            )
            return sol
        ups, lam = ups_next, lam_next
        if hn > 0.25 * h_prev:
            rho = min(rho * opts.rho_growth, opts.rho_max)
        h_prev = hn
    raise InfeasibleError(
        f"terminal residual {best.terminal_residual:.3e} after "
        f"{opts.max_outer} outer iterations (infeasible or ill-conditioned)",
        best,
    )


def slice_segments(
    solution: FocpSolution, model: SystemModel, n: int, stride: int
) -> list:
    """Cut length-n segments at offsets 0, stride, 2 stride, ... from a solve."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    n_gen = solution.inputs.shape[0]
    out = []
    for offset in range(0, n_gen - n + 1, stride):
        out.append(
            TrajectorySegment(
                states=solution.states[offset : offset + n + 1].copy(),
                inputs=solution.inputs[offset : offset + n].copy(),
                t_start=offset * model.ts,
                system=model.kind,
            )
        )
    return out


def generate_demonstrations(
    model: SystemModel,
    features: FeatureVector,
    truth,
    initial_states,
    n_gen: int,
    n: int,
    stride: int,
    constraints: Optional[ConstraintSet] = None,
    options: Optional[SolverOptions] = None,
) -> list:
    """Long-horizon solves to the equilibrium, sliced into optimal segments.

    Each initial state is driven to the origin over n_gen steps under the
    true time-varying cost starting at t = 0; length-n slices at stride
    offsets are themselves optimal for their own endpoints and carry their
    absolute start times.
    """
    if n_gen < n + stride:
        raise ValueError("generation horizon must cover at least one stride")
    constraints = constraints if constraints is not None else no_constraints()
    segments = []
    for x0 in initial_states:
        problem = FocpProblem(
            model=model,
            features=features,
            theta=truth,
            constraints=constraints,
            x0=np.asarray(x0, dtype=float),
            xN=np.zeros(model.n),
            t0=0.0,
            horizon=n_gen,
        )
        sol = solve_forward(problem, options=options)
        segments.extend(slice_segments(sol, model, n, stride))
    return segments


def recover_multipliers(
    model: SystemModel,
    features: FeatureVector,
    theta_source,
    segment: TrajectorySegment,
    constraints: Optional[ConstraintSet] = None,
    lam=None,
):
    """Least-squares terminal multiplier for a segment under a given cost.

    Minimizes ||grad_U L|| over upsilon; for segments sliced from an optimal
    long trajectory, the optimum is (numerically) zero and the minimizer is
    the slice's terminal costate. Returns (upsilon, residual_norm).
    """
    constraints = constraints if constraints is not None else no_constraints()
    U = segment.inputs
    N, m = U.shape
    theta_tab = theta_table(theta_source, segment.t_start, model.ts, N)
    Ud = Dual.seed(U.ravel())
    x = Dual.constant(segment.states[0], N * m)
    total = None
    for i in range(N):
        u = Ud[i * m : (i + 1) * m]
        term = dm.dot(features(x, u), theta_tab[i])
        if lam is not None:
            for p, gfun in enumerate(constraints.evaluators):
                if lam[i, p] != 0.0:
                    term = term + gfun(x, u) * lam[i, p]
        total = term if total is None else total + term
        x = step(model, x, u)
    grad_cost = np.array(total.dot, dtype=float)
    term_jac = np.array(x.dot, dtype=float)  # (n, N*m)
    ups, *_ = np.linalg.lstsq(term_jac.T, -grad_cost, rcond=None)
    resid = float(np.linalg.norm(term_jac.T @ ups + grad_cost))
    return ups, resid
