"""Validation pipeline and the simulation study suite.

The validation error is the mean over segments of the per-segment RMS gap
between re-optimized and reference trajectories (terminal state excluded):

    e_v = (1/D_v) sum_d sqrt( (1/N) sum_{k<N} |dx_d(k)|^2 + |du_d(k)|^2 )

``revalidate`` re-solves every validation segment with an estimated weight
source fixed; the sweep drivers reproduce the study figures as CSV files.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .costmodel import FeatureVector, TruthProfile, TruthTheta, squared_features
from .dynamics import SystemModel
from .focp import (
    ConstraintSet,
    FocpProblem,
    SolverOptions,
    default_solver_options,
    generate_demonstrations,
    no_constraints,
    recover_multipliers,
    solve_forward,
)
from .kktioc import IocSolution, TtdConfig, sp_ioc, ttd_ioc
from .segments import Dataset, TrajectorySegment

log = logging.getLogger("ttdioc.experiments")


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully pinned experiment cell: system, truth profile, data layout."""

    system: str
    profile: TruthProfile
    ts: float
    horizon: int
    n_gen: int
    stride: int
    d_train: int
    d_val: int
    seed: int
    ttd: TtdConfig


_SYSTEM_DEFAULTS = {
    # the pendulum pair is exponentially unstable near upright, so its
    # horizons stay at/below 4 s to keep single shooting well-conditioned
    "spring3": dict(ts=0.1, horizon=60, n_gen=90, stride=15, d_train=12, d_val=6),
    "pendulum2": dict(ts=0.1, horizon=30, n_gen=40, stride=10, d_train=16, d_val=8),
    "spring1": dict(ts=0.1, horizon=60, n_gen=90, stride=15, d_train=8, d_val=4),
}

_TTD_DEFAULTS = {
    "spring3": TtdConfig(
        e_count=2,
        omega_start=0.5,
        omega_stop=2.5,
        omega_step=2.0,
        beta_start=0.04,
        beta_stop=0.06,
        beta_step=0.01,
        anchor_value=7.0,
    ),
    # the pendulum cell keeps the one-point frequency grid but scales the
    # regularization weights down: at 0.058 the l1 term exceeds the entire
    # stationarity residual of this low-excitation dataset and the line
    # search would select a collapsed (constant) model
    "pendulum2": TtdConfig(
        e_count=2,
        omega_start=0.11,
        omega_stop=0.11,
        omega_step=0.0,
        beta_start=0.002,
        beta_stop=0.005,
        beta_step=0.003,
        anchor_value=7.0,
    ),
    "spring1": TtdConfig(
        e_count=2,
        omega_start=0.5,
        omega_stop=2.5,
        omega_step=2.0,
        beta_start=0.04,
        beta_stop=0.06,
        beta_step=0.01,
        anchor_value=7.0,
    ),
}

_STATE_BOUNDS = {
    "spring3": 1.0,  # uniform over the inf-norm ball
    "pendulum2": 0.3,  # |phi|, |rate| <= 0.3 keeps the upright solves benign
    "spring1": 1.0,
}


def default_spec(system: str, profile: TruthProfile, seed: int = 7) -> ExperimentSpec:
    base = _SYSTEM_DEFAULTS[system]
    return ExperimentSpec(
        system=system, profile=profile, seed=seed, ttd=_TTD_DEFAULTS[system], **base
    )


def initial_states(system: str, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = SystemModel(system).n
    return rng.uniform(-_STATE_BOUNDS[system], _STATE_BOUNDS[system], size=(count, n))


def build_dataset(
    spec: ExperimentSpec,
    constraints: Optional[ConstraintSet] = None,
    options: Optional[SolverOptions] = None,
) -> Dataset:
    """Generate demonstrations for one cell and split train/validation.

    The split is by initial condition (slices of the later initial states
    form the validation set), so validation always sees unseen starts.
    """
    model = SystemModel(spec.system, ts=spec.ts)
    features = squared_features(model)
    truth = TruthTheta(spec.system, spec.profile)
    slices = len(range(0, spec.n_gen - spec.horizon + 1, spec.stride))
    total = spec.d_train + spec.d_val
    n_ic = math.ceil(total / slices)
    starts = initial_states(spec.system, n_ic, spec.seed)
    segments = generate_demonstrations(
        model,
        features,
        truth,
        starts,
        n_gen=spec.n_gen,
        n=spec.horizon,
        stride=spec.stride,
        constraints=constraints,
        options=options,
    )
    if len(segments) < total:
        raise RuntimeError("generation produced fewer segments than requested")
    return Dataset(
        system=spec.system,
        ts=spec.ts,
        horizon=spec.horizon,
        truth=spec.profile,
        seed=spec.seed,
        train=segments[: spec.d_train],
        validation=segments[spec.d_train : total],
    )


@dataclass
class ValidationReport:
    e_v: float
    per_segment: tuple
    method: str
    coords: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_segment = tuple(float(v) for v in self.per_segment)


def segment_error(resolved: TrajectorySegment, reference: TrajectorySegment) -> float:
    if resolved.horizon != reference.horizon:
        raise ValueError("mismatched horizons")
    if resolved.states.shape != reference.states.shape:
        raise ValueError("mismatched state dimensions")
    n = reference.horizon
    dx = resolved.states[:n] - reference.states[:n]
    du = resolved.inputs - reference.inputs
    return float(np.sqrt((np.sum(dx * dx) + np.sum(du * du)) / n))


def validation_error(resolved, reference) -> float:
    """Mean per-segment RMS gap; zero iff every compared stage coincides."""
    resolved = list(resolved)
    reference = list(reference)
    if len(resolved) != len(reference):
        raise ValueError("mismatched segment counts")
    if not resolved:
        raise ValueError("no segments to compare")
    return float(np.mean([segment_error(a, b) for a, b in zip(resolved, reference)]))


def revalidate(
    theta_source,
    dataset: Dataset,
    model: Optional[SystemModel] = None,
    features: Optional[FeatureVector] = None,
    constraints: Optional[ConstraintSet] = None,
    options: Optional[SolverOptions] = None,
    method: str = "TTD",
    coords: Optional[dict] = None,
):
    """Re-solve every validation segment with the weight source fixed.

    Returns (resolved segments, report); solver failures yield e_v = +inf
    with per-segment diagnostics instead of aborting.
    """
    if model is None:
        model = SystemModel(dataset.system, ts=dataset.ts)
    if features is None:
        features = squared_features(model)
    constraints = constraints if constraints is not None else no_constraints()
    opts = options if options is not None else default_solver_options(model.kind)
    resolved = []
    errors = []
    failed = False
    for seg in dataset.validation:
        problem = FocpProblem(
            model=model,
            features=features,
            theta=theta_source,
            constraints=constraints,
            x0=seg.states[0],
            xN=seg.states[-1],
            t0=seg.t_start,
            horizon=seg.horizon,
        )
        try:
            ups0, _ = recover_multipliers(
                model, features, theta_source, seg, constraints
            )
            sol = solve_forward(
                problem, options=opts, warm_start=seg.inputs, warm_upsilon=ups0
            )
            new_seg = TrajectorySegment(
                states=sol.states,
                inputs=sol.inputs,
                t_start=seg.t_start,
                system=seg.system,
            )
            resolved.append(new_seg)
            errors.append(segment_error(new_seg, seg))
        except Exception as exc:
            log.warning("validation re-solve failed at t=%.2f: %s", seg.t_start, exc)
            resolved.append(seg)
            errors.append(np.inf)
            failed = True
    e_v = float("inf") if failed else float(np.mean(errors))
    report = ValidationReport(
        e_v=e_v, per_segment=tuple(errors), method=method, coords=dict(coords or {})
    )
    return resolved, report


@dataclass
class ComparisonResult:
    dataset: Dataset
    ttd_solution: IocSolution
    sp_solution: IocSolution
    ttd_report: ValidationReport
    sp_report: ValidationReport


def run_comparison(
    spec: ExperimentSpec,
    dataset: Optional[Dataset] = None,
    options: Optional[SolverOptions] = None,
) -> ComparisonResult:
    """Both estimators on the same dataset, both validated."""
    model = SystemModel(spec.system, ts=spec.ts)
    features = squared_features(model)
    if dataset is None:
        dataset = build_dataset(spec, options=options)
    coords = {"system": spec.system, "profile": spec.profile.kind}
    ttd_sol = ttd_ioc(dataset, spec.ttd, model=model, features=features)
    _, ttd_report = revalidate(
        ttd_sol.model, dataset, model, features, method="TTD", coords=coords
    )
    sp_sol = sp_ioc(dataset, anchor=spec.ttd.anchor_value, model=model, features=features)
    _, sp_report = revalidate(
        sp_sol.model, dataset, model, features, method="spIOC", coords=coords
    )
    return ComparisonResult(
        dataset=dataset,
        ttd_solution=ttd_sol,
        sp_solution=sp_sol,
        ttd_report=ttd_report,
        sp_report=sp_report,
    )


def sweep_ts(
    spec: ExperimentSpec,
    targets,
    solution: Optional[IocSolution] = None,
    dataset: Optional[Dataset] = None,
) -> list:
    """Revalidate a model trained at the base cell on fresh data per sampling time."""
    return _sweep_generalization(spec, "ts", targets, solution, dataset)


def sweep_n(
    spec: ExperimentSpec,
    targets,
    solution: Optional[IocSolution] = None,
    dataset: Optional[Dataset] = None,
) -> list:
    """Revalidate a model trained at the base cell on fresh data per horizon."""
    return _sweep_generalization(spec, "n", targets, solution, dataset)


def _sweep_generalization(spec, axis, targets, solution, dataset):
    model = SystemModel(spec.system, ts=spec.ts)
    features = squared_features(model)
    if solution is None:
        if dataset is None:
            dataset = build_dataset(spec)
        solution = ttd_ioc(dataset, spec.ttd, model=model, features=features)
    reports = []
    for target in targets:
        if axis == "ts":
            cell = replace(spec, ts=float(target))
        else:
            n_t = int(target)
            cell = replace(spec, horizon=n_t, n_gen=n_t + 2 * spec.stride)
        fresh = build_dataset(cell)
        coords = {
            "system": spec.system,
            "profile": spec.profile.kind,
            "ts": cell.ts,
            "n": cell.horizon,
        }
        _, report = revalidate(
            solution.model,
            fresh,
            SystemModel(cell.system, ts=cell.ts),
            features,
            method="TTD",
            coords=coords,
        )
        reports.append(report)
    return reports


def sweep_e(spec: ExperimentSpec, e_values, dataset: Optional[Dataset] = None) -> list:
    """Retrain per basis count on one dataset; returns (E, solution, report) triples."""
    model = SystemModel(spec.system, ts=spec.ts)
    features = squared_features(model)
    if dataset is None:
        dataset = build_dataset(spec)
    out = []
    for e in e_values:
        cfg = replace(spec.ttd, e_count=int(e))
        sol = ttd_ioc(dataset, cfg, model=model, features=features)
        coords = {"system": spec.system, "profile": spec.profile.kind, "E": int(e)}
        _, report = revalidate(
            sol.model, dataset, model, features, method="TTD", coords=coords
        )
        out.append((int(e), sol, report))
    return out


def spurious_coefficient_ratio(solution: IocSolution, n_true: int = 2) -> float:
    """Largest penalized coefficient on the (E - n_true) weakest tones,
    relative to the overall largest coefficient magnitude."""
    A = solution.model.coeffs
    e_count = len(solution.model.freqs)
    if e_count <= n_true:
        return 0.0
    tone_mag = [
        float(np.max(np.abs(A[2 * e + 1 : 2 * e + 3, 1:]))) for e in range(e_count)
    ]
    weakest = sorted(range(e_count), key=lambda e: tone_mag[e])[: e_count - n_true]
    top = float(np.max(np.abs(A)))
    return max(tone_mag[e] for e in weakest) / max(top, 1e-300)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    """CSV with a mandatory header; floats as shortest round-trip decimals."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
