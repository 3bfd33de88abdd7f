"""Stage-cost features, the trigonometric time basis, and weight profiles.

The stage cost decomposes as theta(t) . phi(x, u): a known feature vector
phi weighted by a time-varying row vector theta. The trig model represents
theta(t) = omega(W, t) @ A with omega the basis row
[1, cos(w1 t), sin(w1 t), ..., cos(wE t), sin(wE t)].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import duals as dm
from .dynamics import SystemModel

# Constant weights of the benchmark forward problems; the final slot is the
# time-varying parameter appended by the profile.
BASE_WEIGHTS = {
    "spring3": (7.0, 5.0, 6.0, 8.0, 6.5, 5.5, 2.0, 4.0),
    "pendulum2": (7.0, 5.0, 10.0, 5.0, 4.0),
    "spring1": (7.0, 5.0),
}


@dataclass(frozen=True)
class FeatureVector:
    """Differentiable feature map (state, input) -> nonnegative q-vector."""

    q: int
    evaluator: Callable

    def __call__(self, x, u):
        return self.evaluator(x, u)


def squared_features(model: SystemModel) -> FeatureVector:
    """Squares of all states and inputs, q = n + m."""

    def ev(x, u):
        if isinstance(x, dm.Dual):
            return dm.Dual(
                np.concatenate([x.val * x.val, u.val * u.val]),
                np.concatenate(
                    [2.0 * x.val[:, None] * x.dot, 2.0 * u.val[:, None] * u.dot]
                ),
            )
        return np.concatenate([x * x, u * u])

    return FeatureVector(q=model.n + model.m, evaluator=ev)


def omega(freqs, t: float) -> np.ndarray:
    """Basis row [1, cos(w1 t), sin(w1 t), ...] of length 2E+1."""
    freqs = np.asarray(freqs, dtype=float)
    out = np.empty(2 * freqs.size + 1)
    out[0] = 1.0
    if freqs.size:
        wt = freqs * t
        out[1::2] = np.cos(wt)
        out[2::2] = np.sin(wt)
    return out


def omega_table(freqs, times) -> np.ndarray:
    """Stack of omega rows, shape (len(times), 2E+1)."""
    freqs = np.asarray(freqs, dtype=float)
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, 2 * freqs.size + 1))
    out[:, 0] = 1.0
    if freqs.size:
        wt = np.outer(times, freqs)
        out[:, 1::2] = np.cos(wt)
        out[:, 2::2] = np.sin(wt)
    return out


@dataclass(frozen=True)
class TrigTimeModel:
    """Frequencies W (strictly increasing) and coefficients A of theta(t)."""

    freqs: tuple
    coeffs: np.ndarray  # (2E+1, q)

    def __post_init__(self):
        freqs = tuple(float(w) for w in self.freqs)
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError("frequencies must be strictly increasing")
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != 2 * len(freqs) + 1:
            raise ValueError("coefficient matrix must have 2E+1 rows")

    @property
    def e_count(self) -> int:
        return len(self.freqs)

    @property
    def q(self) -> int:
        return self.coeffs.shape[1]

    def theta_at(self, t: float) -> np.ndarray:
        return omega(self.freqs, t) @ self.coeffs

    def theta_table(self, times) -> np.ndarray:
        return omega_table(self.freqs, times) @ self.coeffs


@dataclass(frozen=True)
class ConstantTheta:
    """Time-invariant weight vector."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def q(self) -> int:
        return self.values.size

    def theta_at(self, t: float) -> np.ndarray:
        return self.values


@dataclass(frozen=True)
class SteppedTheta:
    """Piecewise-constant weights on a uniform time grid (clamped lookup)."""

    ts: float
    start_index: int
    table: np.ndarray  # (T, q)

    def __post_init__(self):
        object.__setattr__(self, "table", np.asarray(self.table, dtype=float))

    @property
    def q(self) -> int:
        return self.table.shape[1]

    def theta_at(self, t: float) -> np.ndarray:
        idx = int(round(t / self.ts)) - self.start_index
        idx = min(max(idx, 0), self.table.shape[0] - 1)
        return self.table[idx]


PROFILE_KINDS = ("trig", "poly", "exp", "constant", "harmonic")


@dataclass(frozen=True)
class TruthProfile:
    """One scalar time profile for the time-varying weight slot.

    kinds: trig      4 + 1.5 cos(2t) + 1.5 cos(3t)
           poly      1.5 + 0.02 t^2 - 0.01 t
           exp       4 + e^{0.2 t}
           constant  value
           harmonic  4 + sum_{j=1..order} (1.5 / j) cos(j t)
    """

    kind: str
    value: float = 0.0
    order: int = 0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.kind == "harmonic" and self.order < 0:
            raise ValueError("harmonic order must be nonnegative")

    def scalar(self, t: float) -> float:
        if self.kind == "trig":
            return 4.0 + 1.5 * math.cos(2.0 * t) + 1.5 * math.cos(3.0 * t)
        if self.kind == "poly":
            return 1.5 + 0.02 * t * t - 0.01 * t
        if self.kind == "exp":
            return 4.0 + math.exp(0.2 * t)
        if self.kind == "constant":
            return self.value
        acc = 4.0
        for j in range(1, self.order + 1):
            acc += (1.5 / j) * math.cos(j * t)
        return acc

    def tag(self) -> dict:
        return {"kind": self.kind, "value": self.value, "order": self.order}

    @classmethod
    def from_tag(cls, tag: dict) -> "TruthProfile":
        return cls(
            kind=tag["kind"],
            value=float(tag.get("value", 0.0)),
            order=int(tag.get("order", 0)),
        )


@dataclass(frozen=True)
class TruthTheta:
    """Benchmark weight vector: constant base weights plus one profiled slot."""

    system: str
    profile: TruthProfile
    slot: Optional[int] = None
    _base: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.system not in BASE_WEIGHTS:
            raise ValueError(f"no benchmark weights for system {self.system!r}")
        base = np.array(BASE_WEIGHTS[self.system] + (0.0,))
        slot = self.slot if self.slot is not None else base.size - 1
        if not 0 <= slot < base.size:
            raise ValueError("profile slot out of range")
        object.__setattr__(self, "slot", slot)
        object.__setattr__(self, "_base", base)

    @property
    def q(self) -> int:
        return self._base.size

    def theta_at(self, t: float) -> np.ndarray:
        out = self._base.copy()
        out[self.slot] = self.profile.scalar(t)
        return out


def truth_theta(system: str, profile: TruthProfile, t: float) -> np.ndarray:
    return TruthTheta(system, profile).theta_at(t)


def theta_table(theta_source, t0: float, ts: float, n: int) -> np.ndarray:
    """Weights at the stage times t0 + i ts, i = 0..n-1, as an (n, q) array."""
    return np.stack([theta_source.theta_at(t0 + i * ts) for i in range(n)])


def stage_cost(theta_source, features: FeatureVector, t: float, x, u):
    """theta(t) . phi(x, u); differentiable in (x, u) through Duals."""
    return dm.dot(features(x, u), theta_source.theta_at(t))
