"""Explicit Euler rollouts of the (controlled) flow ODE."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffengine as de
from .flowmodel import MlpVectorField


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state after Euler step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        if not (0.0 <= self.t_start < self.t_end <= 1.0):
            raise ValueError(f"TimeGrid needs 0 <= t_start < t_end <= 1 (got {self.t_start}, {self.t_end})")
        if self.steps < 1:
            raise ValueError(f"TimeGrid needs steps >= 1 (got {self.steps})")

    @property
    def width(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        k = np.arange(self.steps + 1)
        out = self.t_start + k * (self.t_end - self.t_start) / self.steps
        out[-1] = self.t_end
        return out

    @property
    def widths(self) -> np.ndarray:
        # node differences, so the last cell is exactly 1 - t_{K-1} when t_end = 1
        return np.diff(self.nodes)


@dataclass
class ControlSchedule:
    """Piecewise-constant controls, ``controls[k]`` active on cell k of ``grid``."""

    grid: TimeGrid
    controls: np.ndarray  # (steps, d)

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=np.float64)
        if self.controls.ndim != 2 or self.controls.shape[0] != self.grid.steps:
            raise de.ShapeError(
                f"ControlSchedule: {self.controls.shape} controls for a {self.grid.steps}-step grid")

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int) -> "ControlSchedule":
        return cls(grid, np.zeros((grid.steps, dim)))


@dataclass
class Trajectory:
    times: np.ndarray   # (K+1,)
    states: np.ndarray  # (K+1, d)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.shape[0] != self.times.shape[0]:
            raise de.ShapeError(f"Trajectory: {self.states.shape[0]} states for {self.times.shape[0]} times")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.times)


def _check(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(step)


def euler_sample(model: MlpVectorField, x0, steps: int, grid: TimeGrid | None = None) -> Trajectory:
    """Uncontrolled Euler integration, by default over [0, 1] in ``steps`` steps.

    ``x0`` may be a batch ``(B, d)``; states then have shape ``(K+1, B, d)``.
    """
    grid = grid or TimeGrid(0.0, 1.0, steps)
    times, widths = grid.nodes, grid.widths
    x = np.asarray(x0, dtype=np.float64)
    states = [x]
    for k in range(grid.steps):
        t = times[k] if x.ndim == 1 else np.full(x.shape[0], times[k])
        x = x + widths[k] * model(x, t).value
        _check(x, k)
        states.append(x)
    return Trajectory(times, np.array(states))


def rollout(model: MlpVectorField, x0, controls: Sequence, grid: TimeGrid,
            frozen_first: np.ndarray | None = None) -> list[de.Node]:
    """Differentiable controlled Euler rollout; returns the K+1 state nodes.

    ``controls`` are nodes (or arrays) of shape (d,).  ``frozen_first`` may
    supply a precomputed velocity at ``(x0, t_start)`` so the first step
    does not evaluate the model again.
    """
    times, widths = grid.nodes, grid.widths
    x = de.as_node(x0)
    states = [x]
    for k in range(grid.steps):
        u = de.as_node(controls[k])
        if u.shape != x.shape:
            raise de.ShapeError(f"rollout: control {u.shape} vs state {x.shape} at step {k}")
        v = de.const(frozen_first) if (k == 0 and frozen_first is not None) else model(x, times[k])
        x = de.add(x, de.scale(de.add(v, u), widths[k]))
        _check(x.value, k)
        states.append(x)
    return states


def euler_controlled(model: MlpVectorField, x0, schedule: ControlSchedule) -> Trajectory:
    if schedule.controls.shape[1] != model.dim:
        raise de.ShapeError(f"euler_controlled: controls of dim {schedule.controls.shape[1]}, model dim {model.dim}")
    states = rollout(model, x0, list(schedule.controls), schedule.grid)
    return Trajectory(schedule.grid.nodes, np.array([s.value for s in states]))


def one_step_prediction(model: MlpVectorField, x, t: float) -> de.Node:
    """Straight-line endpoint estimate x + (1 - t) v(x, t).

    The field is evaluated even at t = 1, where the zero weight leaves ``x``
    bit-for-bit unchanged; callers that count network evaluations see the
    same count at every time.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"one_step_prediction: time {t} outside [0, 1]")
    x = de.as_node(x)
    return de.add(x, de.scale(model(x, t), 1.0 - t))


# ---------------------------------------------------------------------------
# CSV dump


def write_trajectory_csv(path, traj: Trajectory) -> None:
    d = traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t"] + [f"x_{i}" for i in range(d)])
        for k, (t, x) in enumerate(zip(traj.times, traj.states)):
            w.writerow([k, repr(float(t))] + [repr(float(v)) for v in x])


def read_trajectory_csv(path) -> Trajectory:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["k", "t"] or any(h != f"x_{i}" for i, h in enumerate(header[2:])):
        raise ValueError(f"unexpected trajectory header {header}")
    times = [float(r[1]) for r in body]
    states = [[float(v) for v in r[2:]] for r in body]
    return Trajectory(np.array(times), np.array(states))
