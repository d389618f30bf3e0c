"""Guidance of a pretrained flow by optimal control.

Four solvers share one inner optimizer (Adam on the control vectors,
zero-initialized unless warm-starting is requested):

``global_control_solve``
    all N controls jointly, backpropagating through the whole rollout.
``mpc_rhc``
    receding horizon: at every outer step re-plan the remaining interval
    ``[t', 1]`` on a K-cell grid, apply only the first control.
``mpc_rhc_single``
    the K = 1 case, where the velocity at the current state is a constant
    and the inner gradient never touches the network.
``mpc_delta_t``
    greedy one-step control scored by the straight-line endpoint
    prediction ``x + (1 - t) v(x, t)``.

All objectives weight control energy by cell width, so the full-horizon
objective is ``sum_k dt_k ||u_k||^2 + lam * phi(x_N)``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffengine as de
from .dynamics import ControlSchedule, TimeGrid, Trajectory, one_step_prediction, rollout
from .flowmodel import AdamState, adam_step, count_evals

log = logging.getLogger(__name__)

Phi = Callable[[de.Node], de.Node]

METHODS = ("global", "rhc", "rhc1", "deltat")


class SolverError(RuntimeError):
    def __init__(self, message: str, method: str = "", outer: int | None = None, inner: int | None = None):
        where = ", ".join(f"{k}={v}" for k, v in (("method", method), ("outer", outer), ("inner", inner))
                          if v not in (None, ""))
        super().__init__(f"{message} ({where})" if where else message)
        self.method, self.outer, self.inner = method, outer, inner


@dataclass
class GuidanceConfig:
    lam: float = 1.0
    N: int = 20
    K: int | None = None          # rhc lookahead; None re-plans on the full remaining N-grid
    lr: float = 0.1
    n_ctrl: int = 50
    tol: float = 1e-6             # early stop when relative J improvement over `window` iters < tol
    window: int = 20
    rescale: bool = False         # deltat: use lam / dt inside the one-step problem
    warm_start: bool = False
    single_step: str = "short"    # rhc1: "short" advances by 1/N, "oneshot" jumps straight to t = 1
    seed: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0 (got {self.lam})")
        if self.N < 1:
            raise ValueError(f"N must be >= 1 (got {self.N})")
        if self.K is not None and self.K < 1:
            raise ValueError(f"K must be >= 1 (got {self.K})")
        if self.n_ctrl < 1:
            raise ValueError(f"n_ctrl must be >= 1 (got {self.n_ctrl})")
        if self.single_step not in ("short", "oneshot"):
            raise ValueError(f"single_step must be 'short' or 'oneshot' (got {self.single_step!r})")


@dataclass
class SolveStats:
    inner_iters: int = 0
    graph_evals: int = 0           # velocity evaluations inside differentiated graphs
    frozen_evals: int = 0
    vfield_backward_rules: int = 0  # backward rules applied to nodes created by the velocity field
    per_step: list = field(default_factory=list)  # (inner_iters, graph_evals) per outer step


@dataclass
class GuidanceResult:
    method: str
    terminal: np.ndarray
    trajectory: Trajectory
    schedule: ControlSchedule
    J: float
    energy: float
    terminal_loss: float
    lam: float
    wall_time: float
    config: GuidanceConfig
    lam_inner: float | None = None
    stats: SolveStats = field(default_factory=SolveStats)

    def check(self, rtol: float = 1e-10) -> None:
        """Assert the stored objective equals energy + lam * terminal loss."""
        recomputed = self.energy + self.lam * self.terminal_loss
        if abs(recomputed - self.J) > rtol * max(abs(self.J), 1e-300):
            raise AssertionError(f"J={self.J} but energy + lam * loss = {recomputed}")

    def summary(self, **extra) -> dict:
        out = {
            "method": self.method, "lambda": self.lam, "lambda_inner": self.lam_inner,
            "N": self.config.N, "K": self.config.K, "n_ctrl": self.config.n_ctrl, "lr": self.config.lr,
            "seed": self.config.seed, "J": self.J, "energy": self.energy,
            "terminal_loss": self.terminal_loss, "wall_time_s": self.wall_time,
        }
        out.update(extra)
        return out

    def to_json(self, **extra) -> str:
        return json.dumps(self.summary(**extra), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# objective pieces


def control_energy(schedule: ControlSchedule) -> float:
    """sum_k dt_k ||u_k||^2."""
    u = schedule.controls
    return float(np.sum(schedule.grid.widths * np.sum(u * u, axis=1)))


def _energy_node(controls: Sequence[de.Node], widths: np.ndarray) -> de.Node:
    total = None
    for w, u in zip(widths, controls):
        term = de.scale(de.sqnorm(u), w)
        total = term if total is None else de.add(total, term)
    return total


def objective_eval(model, x0, schedule: ControlSchedule, phi: Phi, lam: float) -> float:
    x_end = rollout(model, x0, list(schedule.controls), schedule.grid)[-1]
    return control_energy(schedule) + lam * float(phi(x_end).value)


def _finish(method: str, model, x0, phi: Phi, lam: float, outer: TimeGrid, applied: list,
            states: list, cfg: GuidanceConfig, t0: float, stats: SolveStats,
            lam_inner: float | None = None) -> GuidanceResult:
    schedule = ControlSchedule(outer, np.array(applied))
    energy = control_energy(schedule)
    loss = float(phi(de.const(states[-1])).value)
    traj = Trajectory(outer.nodes, np.array(states))
    return GuidanceResult(method, traj.terminal, traj, schedule, energy + lam * loss, energy, loss,
                          lam, time.perf_counter() - t0, cfg, lam_inner, stats)


# ---------------------------------------------------------------------------
# inner optimizer


def _minimize(objective: Callable[[list[de.Node]], de.Node], init: list[np.ndarray],
              cfg: GuidanceConfig, stats: SolveStats, method: str, outer: int | None = None,
              n_steps: int | None = None) -> tuple[list[np.ndarray], float]:
    """Adam on ``objective``; returns the best evaluated iterate and its value."""
    n_steps = cfg.n_ctrl if n_steps is None else n_steps
    params = [np.array(p, dtype=np.float64) for p in init]
    state = AdamState(lr=cfg.lr)
    history: list[float] = []
    best_val, best = np.inf, params
    graph0 = stats.graph_evals
    iters = 0
    for it in range(n_steps + 1):
        leaves = [de.leaf(p) for p in params]
        with count_evals() as counter:
            J = objective(leaves)
        stats.graph_evals += counter.graph
        stats.frozen_evals += counter.frozen
        val = float(J.value)
        if not np.isfinite(val):
            raise SolverError(f"non-finite objective {val}", method, outer, it)
        if val < best_val:
            best_val, best = val, params
        history.append(val)
        if it == n_steps:
            break
        if cfg.tol > 0 and it >= cfg.window:
            ref = history[it - cfg.window]
            if ref - val <= cfg.tol * abs(ref):
                break
        bstats = de.backward(J)
        stats.vfield_backward_rules += bstats.by_scope.get("vfield", 0)
        iters += 1
        try:
            params, state = adam_step(params, [p.grad for p in leaves], state)
        except FloatingPointError as e:
            raise SolverError(str(e), method, outer, it) from None
    stats.inner_iters += iters
    stats.per_step.append((iters, stats.graph_evals - graph0))
    return best, best_val


def _frozen_velocity(model, x: np.ndarray, t: float) -> np.ndarray:
    return model(x, t).value


# ---------------------------------------------------------------------------
# solvers


def global_control_solve(model, x0, phi: Phi, cfg: GuidanceConfig) -> GuidanceResult:
    """Jointly optimize all N controls of the full-horizon Euler problem."""
    cfg.validate()
    t0 = time.perf_counter()
    x0 = np.asarray(x0, dtype=np.float64)
    grid = TimeGrid(0.0, 1.0, cfg.N)
    widths = grid.widths
    v0 = _frozen_velocity(model, x0, 0.0)
    stats = SolveStats()
    stats.frozen_evals += 1

    def objective(us):
        x_end = rollout(model, x0, us, grid, frozen_first=v0)[-1]
        return de.add(_energy_node(us, widths), de.scale(phi(x_end), cfg.lam))

    init = [np.zeros_like(x0) for _ in range(cfg.N)]
    controls, _ = _minimize(objective, init, cfg, stats, "global")
    states = [s.value for s in rollout(model, x0, controls, grid, frozen_first=v0)]
    return _finish("global", model, x0, phi, cfg.lam, grid, controls, states, cfg, t0, stats)


def mpc_rhc(model, x0, phi: Phi, cfg: GuidanceConfig) -> GuidanceResult:
    """Receding-horizon control with a K-cell plan of the remaining interval."""
    cfg.validate()
    t0 = time.perf_counter()
    x = np.asarray(x0, dtype=np.float64)
    outer = TimeGrid(0.0, 1.0, cfg.N)
    nodes, widths = outer.nodes, outer.widths
    states, applied = [x], []
    stats = SolveStats()
    prev_plan = None
    for j in range(cfg.N):
        t_now = nodes[j]
        K = cfg.K if cfg.K is not None else cfg.N - j
        sub = TimeGrid(t_now, 1.0, K)
        sub_w = sub.widths
        v0 = _frozen_velocity(model, x, t_now)
        stats.frozen_evals += 1

        def objective(us, x=x, v0=v0, sub=sub, sub_w=sub_w):
            x_end = rollout(model, x, us, sub, frozen_first=v0)[-1]
            return de.add(_energy_node(us, sub_w), de.scale(phi(x_end), cfg.lam))

        if cfg.warm_start and prev_plan is not None:
            tail = list(prev_plan[1:]) or [prev_plan[-1]]
            init = (tail + [tail[-1]] * K)[:K]
        else:
            init = [np.zeros_like(x) for _ in range(K)]
        plan, _ = _minimize(objective, init, cfg, stats, "rhc", j)
        prev_plan = plan
        u = plan[0]
        x = x + widths[j] * (v0 + u)
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite state", "rhc", j)
        states.append(x)
        applied.append(u)
    return _finish("rhc", model, x0, phi, cfg.lam, outer, applied, states, cfg, t0, stats)


def mpc_rhc_single(model, x0, phi: Phi, cfg: GuidanceConfig) -> GuidanceResult:
    """K = 1 receding horizon; the network is evaluated only outside the differentiated graph.

    With ``single_step="short"`` the optimized control is applied for one
    outer cell of width 1/N; ``"oneshot"`` applies it over the whole
    remaining interval, which ends the solve after a single step.
    """
    cfg.validate()
    t0 = time.perf_counter()
    x = np.asarray(x0, dtype=np.float64)
    outer = TimeGrid(0.0, 1.0, cfg.N if cfg.single_step == "short" else 1)
    nodes, widths = outer.nodes, outer.widths
    states, applied = [x], []
    stats = SolveStats()
    prev = None
    for j in range(outer.steps):
        t_now = nodes[j]
        h = 1.0 - t_now
        v0 = _frozen_velocity(model, x, t_now)
        stats.frozen_evals += 1

        def objective(us, x=x, v0=v0, h=h):
            (u,) = us
            x_end = de.add(de.const(x), de.scale(de.add(de.const(v0), u), h))
            return de.add(de.scale(de.sqnorm(u), h), de.scale(phi(x_end), cfg.lam))

        init = [prev if (cfg.warm_start and prev is not None) else np.zeros_like(x)]
        (u,), _ = _minimize(objective, init, cfg, stats, "rhc1", j)
        prev = u
        x = x + widths[j] * (v0 + u)
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite state", "rhc1", j)
        states.append(x)
        applied.append(u)
    return _finish("rhc1", model, x0, phi, cfg.lam, outer, applied, states, cfg, t0, stats)


def mpc_delta_t(model, x0, phi: Phi, cfg: GuidanceConfig) -> GuidanceResult:
    """One-step control scored by the straight-line endpoint prediction at t' + dt.

    The inner problem is ``||u||^2 + lam_inner * phi(x' + (1 - t'') v(x', t''))``
    with ``x' = x + dt (v(x, t') + u)`` and ``t'' = t' + dt``; ``lam_inner``
    is ``lam / dt`` when ``cfg.rescale`` is set.
    """
    cfg.validate()
    t0 = time.perf_counter()
    x = np.asarray(x0, dtype=np.float64)
    outer = TimeGrid(0.0, 1.0, cfg.N)
    nodes, widths = outer.nodes, outer.widths
    states, applied = [x], []
    stats = SolveStats()
    lam_inner = cfg.lam / widths[0] if cfg.rescale else cfg.lam
    prev = None
    for j in range(cfg.N):
        t_now, t_next, dt = nodes[j], nodes[j + 1], widths[j]
        v0 = _frozen_velocity(model, x, t_now)
        stats.frozen_evals += 1

        def objective(us, x=x, v0=v0, dt=dt, t_next=t_next):
            (u,) = us
            x_next = de.add(de.const(x), de.scale(de.add(de.const(v0), u), dt))
            pred = one_step_prediction(model, x_next, t_next)
            return de.add(de.sqnorm(u), de.scale(phi(pred), lam_inner))

        init = [prev if (cfg.warm_start and prev is not None) else np.zeros_like(x)]
        (u,), _ = _minimize(objective, init, cfg, stats, "deltat", j)
        prev = u
        x = x + dt * (v0 + u)
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite state", "deltat", j)
        states.append(x)
        applied.append(u)
    return _finish("deltat", model, x0, phi, cfg.lam, outer, applied, states, cfg, t0, stats, lam_inner)


SOLVERS = {
    "global": global_control_solve,
    "rhc": mpc_rhc,
    "rhc1": mpc_rhc_single,
    "deltat": mpc_delta_t,
}


def solve(method: str, model, x0, phi: Phi, cfg: GuidanceConfig) -> GuidanceResult:
    if method not in SOLVERS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return SOLVERS[method](model, x0, phi, cfg)


def config_dict(cfg: GuidanceConfig) -> dict:
    return asdict(cfg)
