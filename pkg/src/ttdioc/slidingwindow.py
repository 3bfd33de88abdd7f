"""Sliding-window baseline: recursive estimation of a locally constant weight.

A linear Kalman filter with a random-walk model re-estimates the weight
vector over a window of M steps slid one step at a time along the training
demonstrations. Measurements are the stationarity-residual rows of the
constant-weight normal system restricted to the window (target zero); the
per-segment terminal multipliers are nuisance unknowns and are eliminated
exactly by projecting each window's rows onto the left null space of the
terminal-Jacobian columns. The first weight is pinned to the anchor and
removed from the filter state.

This estimator is the study's failure case: it cannot represent fast time
variation inside a window, so its validation error grows with the
harmonic order of the true profile.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .costmodel import SteppedTheta, TruthProfile, squared_features
from .dynamics import SystemModel
from .experiments import ExperimentSpec, build_dataset, revalidate
from .kktioc import prepare_bases
from .segments import Dataset

log = logging.getLogger("ttdioc.slidingwindow")


@dataclass(frozen=True)
class SlidingWindowConfig:
    window: int = 10  # M steps; window rows must overdetermine the weights
    process_var: float = 1e-2
    meas_var: float = 1e-4
    init_var: float = 1.0
    anchor: float = 7.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window length must be at least 1")
        for name in ("process_var", "meas_var", "init_var"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class KfEstimate:
    ts: float
    start_index: int
    table: np.ndarray  # (T, q), anchored first column included
    covariance_flags: int  # innovation regularizations applied
    covariance_trace: np.ndarray  # tr(P) after each processed step
    min_cov_eig: float  # smallest eigenvalue seen across updates

    def theta_source(self) -> SteppedTheta:
        return SteppedTheta(ts=self.ts, start_index=self.start_index, table=self.table)


def _window_measurement(j_theta, j_ups, rows, anchor):
    """Project the window rows against the terminal-multiplier columns.

    Returns (H, y) with H acting on the non-anchored weights; rows is a
    slice into one segment's stationarity components.
    """
    Jt = j_theta[rows]
    Ju = j_ups[rows]
    u_svd, s_svd, _ = np.linalg.svd(Ju, full_matrices=True)
    rank = int(np.sum(s_svd > max(1e-12, 1e-10 * (s_svd[0] if s_svd.size else 0.0))))
    basis = u_svd[:, rank:]
    H = basis.T @ Jt[:, 1:]
    y = basis.T @ (-anchor * Jt[:, 0])
    return H, y


def kf_estimate(
    dataset_train,
    config: SlidingWindowConfig,
    model: Optional[SystemModel] = None,
    ts: Optional[float] = None,
) -> KfEstimate:
    """Filter the training segments; returns weights at each covered step.

    ``dataset_train`` is a Dataset (its training split is used) or a list of
    segments. Windows slide one step; steps without any full window are
    prediction-only (covariance grows by the process noise).
    """
    if isinstance(dataset_train, Dataset):
        segs = list(dataset_train.train)
        model = model or SystemModel(dataset_train.system, ts=dataset_train.ts)
    else:
        segs = list(dataset_train)
        if model is None:
            raise ValueError("model required when passing raw segments")
    if not segs:
        raise ValueError("empty training set")
    ts = ts if ts is not None else model.ts
    segs = sorted(segs, key=lambda s: s.t_start)
    features = squared_features(model)
    q = features.q
    m_dim = model.m
    M = config.window
    if M * m_dim < q:
        raise ValueError("window too short: M*m must reach the weight count")
    bases = prepare_bases(
        Dataset(
            system=model.kind,
            ts=ts,
            horizon=segs[0].horizon,
            truth=TruthProfile("constant", value=0.0),
            seed=0,
            train=segs,
            validation=(),
        ),
        model=model,
        features=features,
    )
    j_theta = [b.phi_grad.sum(axis=0).T for b in bases]  # (N*m, q) each
    j_ups = [b.term_jac.T for b in bases]

    starts = [int(round(s.t_start / ts)) for s in segs]
    windows = {}
    for d, (seg, k0) in enumerate(zip(segs, starts)):
        for i in range(seg.horizon - M + 1):
            windows.setdefault(k0 + i, []).append((d, i))
    k_min, k_max = min(windows), max(windows)

    theta = np.zeros(q - 1)
    P = config.init_var * np.eye(q - 1)
    flags = 0
    table = np.empty((k_max - k_min + 1, q))
    prev_k = None
    estimates = {}
    cov_trace = []
    min_eig = np.inf
    for k in range(k_min, k_max + 1):
        gap = 1 if prev_k is None else k - prev_k
        P = P + gap * config.process_var * np.eye(q - 1)
        prev_k = k
        blocks = windows.get(k, ())
        H_rows, y_rows = [], []
        for d, i in blocks:
            rows = slice(i * m_dim, (i + M) * m_dim)
            H, y = _window_measurement(j_theta[d], j_ups[d], rows, config.anchor)
            if H.shape[0]:
                H_rows.append(H)
                y_rows.append(y)
        if H_rows:
            H = np.vstack(H_rows)
            y = np.concatenate(y_rows)
            S = H @ P @ H.T + config.meas_var * np.eye(H.shape[0])
            if np.linalg.cond(S) > 1e12:
                S = S + 1e-10 * np.eye(S.shape[0])
                flags += 1
            K = P @ H.T @ np.linalg.inv(S)
            theta = theta + K @ (y - H @ theta)
            P = (np.eye(q - 1) - K @ H) @ P
            P = 0.5 * (P + P.T)
            min_eig = min(min_eig, float(np.linalg.eigvalsh(P)[0]))
        estimates[k] = theta.copy()
        cov_trace.append(float(np.trace(P)))
    for k in range(k_min, k_max + 1):
        table[k - k_min, 0] = config.anchor
        table[k - k_min, 1:] = estimates[k]
    return KfEstimate(
        ts=ts,
        start_index=k_min,
        table=table,
        covariance_flags=flags,
        covariance_trace=np.array(cov_trace),
        min_cov_eig=min_eig,
    )


def nonlinearity_sweep(
    orders,
    base_spec: ExperimentSpec,
    config: SlidingWindowConfig,
) -> list:
    """(order, e_v) per harmonic order of the true profile (fresh data each)."""
    orders = list(orders)
    if not orders:
        raise ValueError("orders must be nonempty")
    out = []
    for r in orders:
        spec = replace(base_spec, profile=TruthProfile("harmonic", order=int(r)))
        dataset = build_dataset(spec)
        est = kf_estimate(dataset, config)
        _, report = revalidate(
            est.theta_source(),
            dataset,
            method="KF",
            coords={"system": spec.system, "r": int(r)},
        )
        out.append((int(r), report.e_v))
        log.info("harmonic order %d: e_v=%.3e", r, report.e_v)
    return out
