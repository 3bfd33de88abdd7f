"""Demonstration segments, train/validation datasets, and their persistence.

Datasets are stored as JSON with Python's shortest round-trip float
formatting, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costmodel import TruthProfile
from .dynamics import SystemModel, rollout


@dataclass(frozen=True)
class TrajectorySegment:
    """One demonstration: states (N+1, n), inputs (N, m), absolute start time."""

    states: np.ndarray
    inputs: np.ndarray
    t_start: float
    system: str

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        if states.ndim != 2 or inputs.ndim != 2:
            raise ValueError("states and inputs must be 2-d arrays")
        if states.shape[0] != inputs.shape[0] + 1:
            raise ValueError("states must have one more row than inputs")

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]


def dynamics_gap(model: SystemModel, segment: TrajectorySegment) -> float:
    """Max deviation between stored states and a re-rollout of the inputs."""
    replay = rollout(model, segment.states[0], segment.inputs)
    return float(np.max(np.abs(replay - segment.states)))


@dataclass(frozen=True)
class Dataset:
    """Disjoint training/validation segments sharing system, Ts and horizon."""

    system: str
    ts: float
    horizon: int
    truth: TruthProfile
    seed: int
    train: tuple = field(default_factory=tuple)
    validation: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "validation", tuple(self.validation))
        for seg in self.train + self.validation:
            if seg.system != self.system or seg.horizon != self.horizon:
                raise ValueError("segment does not match dataset metadata")

    @property
    def all_segments(self) -> tuple:
        return self.train + self.validation


def _segment_to_dict(seg: TrajectorySegment) -> dict:
    return {
        "t_start": seg.t_start,
        "X": seg.states.tolist(),
        "U": seg.inputs.tolist(),
    }


def _segment_from_dict(d: dict, system: str) -> TrajectorySegment:
    return TrajectorySegment(
        states=np.array(d["X"], dtype=float),
        inputs=np.array(d["U"], dtype=float),
        t_start=float(d["t_start"]),
        system=system,
    )


def save_dataset(path, dataset: Dataset) -> None:
    doc = {
        "schema": "ttdioc.dataset.v1",
        "system": dataset.system,
        "ts": dataset.ts,
        "n_horizon": dataset.horizon,
        "truth": dataset.truth.tag(),
        "seed": dataset.seed,
        "train": [_segment_to_dict(s) for s in dataset.train],
        "validation": [_segment_to_dict(s) for s in dataset.validation],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_dataset(path) -> Dataset:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != "ttdioc.dataset.v1":
        raise ValueError(f"unrecognized dataset schema in {path}")
    system = doc["system"]
    return Dataset(
        system=system,
        ts=float(doc["ts"]),
        horizon=int(doc["n_horizon"]),
        truth=TruthProfile.from_tag(doc["truth"]),
        seed=int(doc["seed"]),
        train=tuple(_segment_from_dict(d, system) for d in doc["train"]),
        validation=tuple(_segment_from_dict(d, system) for d in doc["validation"]),
    )
