"""Leader/follower integration, lag-error SDE integration and Monte Carlo estimates.

Leader: classical RK4 from t = -tau. Followers and the error SDE:
Euler-Maruyama driven by one scalar Wiener process shared by all agents.
The step grid is the uniform ``dt`` grid merged with every switching instant
of the schedule, so control activity never changes inside a step.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import IntrinsicDynamics
from .errorsys import CouplingGains, NoiseIntensities, SystemMatrices, build_system
from .graph import LaplacianSet, NoiseTopology, PinningConfig, WeightedDigraph
from .schedule import IntermittentSchedule, always_active, generate_random

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e9
MODES = ("closed_loop", "error_sde", "raw_perception")


class SimulationDivergence(RuntimeError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class Problem:
    """Everything that defines one closed-loop network."""
    graph: WeightedDigraph
    pinning: PinningConfig
    gains: CouplingGains
    noise: NoiseIntensities
    dynamics: IntrinsicDynamics
    sigma: NoiseTopology | None = None

    @cached_property
    def laplacians(self) -> LaplacianSet:
        return LaplacianSet.build(self.graph, self.pinning, self.sigma)

    @cached_property
    def system(self) -> SystemMatrices:
        return build_system(self.laplacians, self.gains, self.noise)

    @property
    def n_agents(self) -> int:
        return self.graph.n

    @property
    def dim(self) -> int:
        return self.dynamics.dim


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    horizon: float = 15.0
    tau: float = 0.0
    trials: int = 1
    seed: int = 0
    init_box: tuple[float, float] = (0.0, 1.0)
    mode: str = "closed_loop"
    fresh_schedule: bool = True

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("dt and horizon must be positive")
        if self.tau < 0:
            raise ValueError("lag tau must be nonnegative")
        if self.trials < 1:
            raise ValueError("need at least one trial")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        lo, hi = self.init_box
        if not lo <= hi:
            raise ValueError("init_box must be an interval (low, high)")

    def check_schedule(self, theta: float) -> None:
        if self.dt > theta / 10 + 1e-15:
            raise ValueError(f"dt={self.dt} exceeds theta/10={theta / 10}")


@dataclass(frozen=True)
class ScheduleSpec:
    """Recipe for per-trial schedules: ``random`` draws with (theta, delta), ``always`` never fails."""
    kind: str = "random"
    theta: float = 0.3
    delta: float = 1.0

    def draw(self, horizon: float, rng: np.random.Generator) -> IntermittentSchedule:
        if self.kind == "always":
            return always_active(horizon)
        if self.kind == "random":
            return generate_random(self.theta, self.delta, horizon, rng)
        raise ValueError(f"unknown schedule kind {self.kind!r}")

    @property
    def min_active(self) -> float:
        return np.inf if self.kind == "always" else self.theta


# --------------------------------------------------------------------------- grids


def _merge(points: np.ndarray, tol: float) -> np.ndarray:
    pts = np.sort(np.asarray(points, dtype=float))
    keep = np.concatenate([[True], np.diff(pts) > tol])
    return pts[keep]


def uniform_grid(horizon: float, dt: float) -> np.ndarray:
    m = int(np.floor(horizon / dt + 1e-9))
    grid = np.arange(m + 1) * dt
    if horizon - grid[-1] > 1e-9 * dt:
        grid = np.append(grid, horizon)
    else:
        grid[-1] = horizon
    return grid


def step_grid(horizon: float, dt: float, breakpoints=()) -> tuple[np.ndarray, np.ndarray]:
    """Uniform grid merged with breakpoints; returns (times, indices of the uniform points)."""
    uni = uniform_grid(horizon, dt)
    bps = np.asarray(breakpoints, dtype=float)
    if bps.size:
        idx = np.clip(np.searchsorted(uni, bps), 1, uni.size - 1)
        gap = np.minimum(np.abs(bps - uni[idx - 1]), np.abs(bps - uni[idx]))
        bps = bps[gap > 1e-9 * dt]
    times = np.sort(np.concatenate([uni, bps]))
    return times, np.searchsorted(times, uni)


def step_activity(schedule: IntermittentSchedule, times: np.ndarray) -> np.ndarray:
    """Activity of each step, read at its midpoint (the grid contains every switch)."""
    mid = (times[:-1] + times[1:]) / 2
    k = np.clip(np.searchsorted(schedule.starts, mid, side="right") - 1, 0, None)
    return mid <= schedule.switch_off[k]


# --------------------------------------------------------------------------- integrators


def _expand(c: np.ndarray, ndim: int) -> np.ndarray:
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def rk4_path(f: Callable[[float, np.ndarray], np.ndarray], y0, times) -> np.ndarray:
    """Classical RK4 on the nodes ``times``: shape ``(T,)``, or ``(B, T)`` for a batch.

    In the batched form ``y0`` has shape ``(B, ...)``, ``f`` receives the
    node times of shape ``(B,)`` and the whole batch; repeated nodes (zero
    steps) leave a path unchanged.
    """
    times = np.asarray(times, dtype=float)
    single = times.ndim == 1
    if single:
        times, y0 = times[None], np.asarray(y0, dtype=float)[None]
    y = np.array(y0, dtype=float)
    out = np.empty((times.shape[1],) + y.shape)
    out[0] = y
    for i in range(times.shape[1] - 1):
        t = times[:, i]
        h = _expand(times[:, i + 1] - t, y.ndim)
        k1 = f(t, y)
        k2 = f(t + h.ravel() / 2, y + h / 2 * k1)
        k3 = f(t + h.ravel() / 2, y + h / 2 * k2)
        k4 = f(t + h.ravel(), y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            bad = times[~np.all(np.isfinite(y.reshape(len(y), -1)), axis=1), i + 1]
            raise SimulationDivergence(f"non-finite state at t={bad[0]:.6g}", float(bad[0]))
        out[i + 1] = y
    out = np.moveaxis(out, 0, 1)
    return out[0] if single else out


@dataclass
class EMResult:
    path: np.ndarray
    stopped_at: np.ndarray | int | None = None


def euler_maruyama(drift, diffusion, y0, times, dW, record=None, abort=None,
                   observe=None) -> EMResult:
    """Euler-Maruyama for ``dy = drift(k, y) dt + diffusion(k, y) dW``.

    Single path: ``times`` has shape ``(T,)`` and ``dW[k]`` is the increment
    over ``[times[k], times[k+1]]``; it broadcasts against the diffusion
    output (a scalar for one shared Wiener process, an array for a bundle of
    independently driven components).

    Batch: ``times`` has shape ``(B, T)``, ``y0`` and ``dW`` carry a leading
    batch axis, and ``drift``/``diffusion`` see the whole batch at step ``k``.
    Zero-length steps (used to pad unequal grids) leave a path unchanged.

    ``diffusion`` may return ``None`` for a noise-free step. ``record`` picks
    the grid indices that are stored (``(R,)`` or ``(B, R)``; default all),
    ``observe(k, y)`` maps the state at grid index ``k`` to what is stored
    (default: the state). ``abort(k, y)`` flags paths to stop; stopped paths
    are frozen and their later records stay NaN. ``stopped_at`` gives the grid
    index of the stop (``None``/-1 when the path ran to the end).
    """
    times = np.asarray(times, dtype=float)
    single = times.ndim == 1
    y = np.array(y0, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if single:
        times, y, dW = times[None], y[None], dW[None]
        if record is not None:
            record = np.asarray(record)[None]
        user_drift, user_diff, user_abort, user_obs = drift, diffusion, abort, observe
        drift = lambda k, z: user_drift(k, z[0])[None]  # noqa: E731

        def diffusion(k, z):
            g = user_diff(k, z[0])
            return None if g is None else np.asarray(g)[None]

        abort = None if user_abort is None else (lambda k, z: np.atleast_1d(user_abort(k, z[0])))
        observe = None if user_obs is None else (lambda k, z: np.asarray(user_obs(k, z[0]))[None])
    B, T = times.shape
    if observe is None:
        observe = lambda k, z: z  # noqa: E731
    rec = np.tile(np.arange(T), (B, 1)) if record is None else np.asarray(record)
    slot = np.full((B, T), -1)
    rows = np.arange(B)[:, None]
    slot[rows, rec] = np.arange(rec.shape[1])[None, :]
    first = np.asarray(observe(0, y))
    out = np.full((B, rec.shape[1]) + first.shape[1:], np.nan)
    has = slot[:, 0] >= 0
    out[has, slot[has, 0]] = first[has]
    h = np.diff(times, axis=1)
    stopped = np.full(B, -1)
    alive = np.ones(B, dtype=bool)
    for k in range(T - 1):
        hk = _expand(h[:, k], y.ndim)
        g = diffusion(k, y)
        step = drift(k, y) * hk
        if g is not None:
            step = step + g * _expand(dW[:, k], g.ndim)
        if alive.all():
            y = y + step
        else:
            y = y + step * _expand(alive.astype(float), y.ndim)
        want = (slot[:, k + 1] >= 0) & alive
        if want.any():
            obs = np.asarray(observe(k + 1, y))
            out[want, slot[want, k + 1]] = obs[want]
        if abort is not None:
            newly = np.asarray(abort(k + 1, y), dtype=bool) & alive
            if newly.any():
                stopped[newly] = k + 1
                alive &= ~newly
                y[newly] = 0.0
                if not alive.any():
                    break
    if single:
        return EMResult(out[0], None if stopped[0] < 0 else int(stopped[0]))
    return EMResult(out, stopped)


def wiener_increments(times: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(len(times) - 1) * np.sqrt(np.diff(times))


# --------------------------------------------------------------------------- leader


@dataclass(frozen=True)
class LeaderHistory:
    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    tau: float

    def at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Leader state at absolute time(s) ``t`` (linear interpolation between nodes)."""
        t = np.asarray(t, dtype=float)
        lo, hi = self.times[0], self.times[-1]
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ValueError(f"time outside stored leader history [{lo}, {hi}]")
        cols_x = [np.interp(t, self.times, self.x[:, j]) for j in range(self.x.shape[1])]
        cols_v = [np.interp(t, self.times, self.v[:, j]) for j in range(self.v.shape[1])]
        return np.stack(cols_x, axis=-1), np.stack(cols_v, axis=-1)


def _check_tau_alignment(tau: float, dt: float) -> None:
    r = tau / dt
    if abs(r - round(r)) > 1e-9:
        warnings.warn(f"tau={tau} is not a multiple of dt={dt}; delayed leader states "
                      "are interpolated", stacklevel=3)


def leader_nodes(tau: float, horizon: float, dt: float, follower_times=None) -> np.ndarray:
    """RK4 nodes on [-tau, horizon] holding both ``follower_times`` and ``follower_times - tau``."""
    if follower_times is None:
        follower_times = uniform_grid(horizon, dt)
    ft = np.asarray(follower_times, dtype=float)
    pre = -tau + uniform_grid(tau, dt) if tau > 0 else np.array([0.0])
    nodes = np.concatenate([pre, ft - tau, ft])
    nodes = _merge(nodes[(nodes >= -tau - 1e-12) & (nodes <= horizon + 1e-12)], 1e-12)
    nodes[0] = -tau
    return nodes


def _leader_rhs(d: IntrinsicDynamics):
    n = d.dim

    def rhs(t, y):
        return np.concatenate([y[..., n:], d(y[..., :n], y[..., n:])], axis=-1)

    return rhs


def simulate_leader(d: IntrinsicDynamics, x0, v0, tau: float, horizon: float, dt: float,
                    follower_times=None) -> LeaderHistory:
    """RK4 from ``(x0, v0)`` at ``t = -tau`` up to ``horizon``.

    The nodes include ``follower_times`` and ``follower_times - tau`` so that
    both current and delayed lookups on the follower grid are exact.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    nodes = leader_nodes(tau, horizon, dt, follower_times)
    n = d.dim
    y0 = np.concatenate([np.ravel(x0), np.ravel(v0)]).astype(float)
    if y0.size != 2 * n:
        raise ValueError(f"leader initial state must have dimension {n}")
    path = rk4_path(_leader_rhs(d), y0, nodes)
    return LeaderHistory(nodes, path[:, :n], path[:, n:], tau)


def leader_delayed(history: LeaderHistory, t, tau: float | None = None):
    """``(x0(t - tau), v0(t - tau))``; ``t`` must be in ``[0, horizon]``."""
    tau = history.tau if tau is None else tau
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > history.times[-1] + 1e-12):
        raise ValueError("t out of range for the delayed leader lookup")
    return history.at(t - tau)


# --------------------------------------------------------------------------- paths


@dataclass
class Trajectory:
    times: np.ndarray
    leader_x: np.ndarray
    leader_v: np.ndarray
    leader_x_delayed: np.ndarray
    leader_v_delayed: np.ndarray
    xi: np.ndarray                      # (T, 2N, n), canonical layout
    followers_x: np.ndarray | None = None
    followers_v: np.ndarray | None = None
    diverged: bool = False
    divergence_time: float | None = None
    mode: str = "closed_loop"

    @property
    def n_agents(self) -> int:
        return self.xi.shape[1] // 2

    @property
    def pos_error(self) -> np.ndarray:
        return self.xi[:, : self.n_agents]

    @property
    def vel_error(self) -> np.ndarray:
        return self.xi[:, self.n_agents:]

    def xi_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.xi ** 2, axis=(1, 2)))


@dataclass(frozen=True)
class PathSetup:
    """Per-path randomness: initial states, schedule, step grid and Wiener increments."""
    leader_x0: np.ndarray
    leader_v0: np.ndarray
    x_init: np.ndarray
    v_init: np.ndarray
    schedule: IntermittentSchedule
    times: np.ndarray
    record: np.ndarray
    dW: np.ndarray

    def with_increments(self, dW) -> "PathSetup":
        return PathSetup(self.leader_x0, self.leader_v0, self.x_init, self.v_init,
                         self.schedule, self.times, self.record, np.asarray(dW, dtype=float))


def prepare_path(problem: Problem, schedule, cfg: SimConfig,
                 rng: np.random.Generator | int | None = None, *,
                 leader_init=None, follower_init=None) -> PathSetup:
    """Draw initial states (uniform on ``cfg.init_box``), the schedule if needed, and ``dW``."""
    rng = np.random.default_rng(rng)
    lo, hi = cfg.init_box
    N, n = problem.n_agents, problem.dim
    if leader_init is None:
        lx, lv = rng.uniform(lo, hi, n), rng.uniform(lo, hi, n)
    else:
        lx, lv = (np.asarray(a, dtype=float).reshape(n) for a in leader_init)
    if follower_init is None:
        fx, fv = rng.uniform(lo, hi, (N, n)), rng.uniform(lo, hi, (N, n))
    else:
        fx, fv = (np.asarray(a, dtype=float).reshape(N, n) for a in follower_init)
    if isinstance(schedule, ScheduleSpec):
        schedule = schedule.draw(cfg.horizon, rng)
    if abs(schedule.horizon - cfg.horizon) > 1e-9:
        raise ValueError("schedule horizon differs from the simulation horizon")
    cfg.check_schedule(schedule.theta)
    times, record = step_grid(cfg.horizon, cfg.dt, schedule.breakpoints)
    return PathSetup(lx, lv, fx, fv, schedule, times, record, wiener_increments(times, rng))


def _pad(rows: list[np.ndarray], width: int) -> np.ndarray:
    """Stack 1-D/2-D arrays along a new batch axis, repeating each last entry up to ``width``."""
    out = []
    for r in rows:
        extra = width - r.shape[0]
        out.append(np.concatenate([r, np.repeat(r[-1:], extra, axis=0)]) if extra else r)
    return np.stack(out)


@dataclass
class _Batch:
    """Padded per-path data; padding steps have zero length and zero noise."""
    times: np.ndarray      # (B, T)
    record: np.ndarray     # (B, R)
    dW: np.ndarray         # (B, T-1)
    act: np.ndarray        # (B, T-1)
    xd: np.ndarray         # (B, T, n) delayed leader position on the follower grid
    vd: np.ndarray
    xc: np.ndarray         # (B, T, n) current leader position
    vc: np.ndarray


def _prepare_batch(problem: Problem, setups: list[PathSetup], cfg: SimConfig) -> _Batch:
    _check_tau_alignment(cfg.tau, cfg.dt)
    T = max(s.times.size for s in setups)
    n = problem.dim
    node_sets = [leader_nodes(cfg.tau, cfg.horizon, cfg.dt, s.times) for s in setups]
    W = max(ns.size for ns in node_sets)
    nodes = _pad(node_sets, W)
    y0 = np.stack([np.concatenate([s.leader_x0, s.leader_v0]) for s in setups])
    lead = rk4_path(_leader_rhs(problem.dynamics), y0, nodes)       # (B, W, 2n)
    xd, vd, xc, vc = [], [], [], []
    for b, s in enumerate(setups):
        ns, path = node_sets[b], lead[b, : node_sets[b].size]
        hist = LeaderHistory(ns, path[:, :n], path[:, n:], cfg.tau)
        a, c = hist.at(s.times - cfg.tau)
        e, f = hist.at(s.times)
        xd.append(a), vd.append(c), xc.append(e), vc.append(f)
    dW = [np.concatenate([s.dW, np.zeros(T - s.times.size)]) for s in setups]
    act = [step_activity(s.schedule, s.times) for s in setups]
    act = [np.concatenate([a, np.zeros(T - 1 - a.size, dtype=bool)]) for a in act]
    return _Batch(_pad([s.times for s in setups], T), np.stack([s.record for s in setups]),
                  np.stack(dW), np.stack(act), _pad(xd, T), _pad(vd, T), _pad(xc, T), _pad(vc, T))


def _follower_fields(problem: Problem, batch: _Batch, raw: bool):
    N = problem.n_agents
    ls, g, ni, f = problem.laplacians, problem.gains, problem.noise, problem.dynamics
    L, D = ls.L, ls.D
    kappa = np.diag(ls.K)[None, :, None]
    act = batch.act.astype(float)[:, :, None, None]
    xd, vd = batch.xd[:, :, None, :], batch.vd[:, :, None, :]
    if raw:
        sig = problem.sigma.sigma if problem.sigma is not None else problem.graph.a
        w = problem.graph.a * sig
        Dp = np.diag(w.sum(axis=1)) - w

    def drift(k, y):
        X, V = y[:, :N], y[:, N:]
        acc = f(X, V) - g.c1 * (L @ X) - g.c2 * (L @ V)
        acc -= act[:, k] * kappa * (g.c1 * (X - xd[:, k]) + g.c2 * (V - vd[:, k]))
        return np.concatenate([V, acc], axis=1)

    def diffusion(k, y):
        X, V = y[:, :N], y[:, N:]
        noise = -(ni.beta1 * (D @ X) + ni.beta2 * (D @ V)) * act[:, k]
        if raw:
            # coupling through the perceived neighbour states, present at all times
            noise -= g.c1 * ni.beta1 * (Dp @ X) + g.c2 * ni.beta2 * (Dp @ V)
        return np.concatenate([np.zeros_like(X), noise], axis=1)

    return drift, diffusion


def _error_fields(problem: Problem, batch: _Batch):
    N = problem.n_agents
    sysm, f, g = problem.system, problem.dynamics, problem.gains
    kappa = np.diag(problem.laplacians.K)[None, :, None]
    act = batch.act.astype(float)[:, :, None, None]
    xd, vd = batch.xd[:, :, None, :], batch.vd[:, :, None, :]
    lead = f(batch.xd, batch.vd)[:, :, None, :]
    H2, U = sysm.H2, sysm.U

    def drift(k, xi):
        # H1 xi = H2 xi - [0; K (c1 x~ + c2 v~)]
        out = H2 @ xi
        xt, vt = xi[:, :N], xi[:, N:]
        out[:, N:] += f(xt + xd[:, k], vt + vd[:, k]) - lead[:, k]
        out[:, N:] -= act[:, k] * kappa * (g.c1 * xt + g.c2 * vt)
        return out

    def diffusion(k, xi):
        return -(U @ xi) * act[:, k]

    return drift, diffusion


def _reference(batch: _Batch, N: int, k) -> np.ndarray:
    """Delayed leader stacked to the (B, 2N, n) follower layout at grid index k."""
    xd, vd = batch.xd[:, k, None, :], batch.vd[:, k, None, :]
    B, n = xd.shape[0], xd.shape[-1]
    return np.concatenate([np.broadcast_to(xd, (B, N, n)), np.broadcast_to(vd, (B, N, n))], axis=1)


def _run_batch(problem: Problem, setups: list[PathSetup], cfg: SimConfig, mode: str,
               observe_kind: str = "state"):
    """Integrate a batch; returns (batch, EMResult). States are followers or errors by mode."""
    batch = _prepare_batch(problem, setups, cfg)
    N = problem.n_agents
    if mode == "error_sde":
        drift, diffusion = _error_fields(problem, batch)
        y0 = np.stack([np.vstack([s.x_init - batch.xd[b, 0], s.v_init - batch.vd[b, 0]])
                       for b, s in enumerate(setups)])

        def to_xi(k, y):
            return y
    else:
        drift, diffusion = _follower_fields(problem, batch, mode == "raw_perception")
        y0 = np.stack([np.vstack([s.x_init, s.v_init]) for s in setups])

        def to_xi(k, y):
            return y - _reference(batch, N, k)

    def abort(k, y):
        e = to_xi(k, y)
        s = np.sum(e.reshape(len(e), -1) ** 2, axis=1)
        return ~np.isfinite(s) | (s > DIVERGENCE_THRESHOLD ** 2)

    if observe_kind == "msq":
        def observe(k, y):
            e = to_xi(k, y)
            return np.stack([np.sum(e[:, :N] ** 2, axis=(1, 2)), np.sum(e[:, N:] ** 2, axis=(1, 2))],
                            axis=1)
    else:
        observe = None
    with np.errstate(over="ignore", invalid="ignore"):
        res = euler_maruyama(drift, diffusion, y0, batch.times, batch.dW, batch.record,
                             abort=abort, observe=observe)
    return batch, res


def _trajectory(problem, setup, batch, res, cfg, mode, keep_states=True) -> Trajectory:
    N = problem.n_agents
    r = setup.record
    path = res.path[0]
    xd, vd = batch.xd[0, r], batch.vd[0, r]
    if mode == "error_sde":
        xi, fx, fv = path, None, None
    else:
        ref = np.concatenate([np.broadcast_to(xd[:, None], (len(r), N, xd.shape[-1])),
                              np.broadcast_to(vd[:, None], (len(r), N, vd.shape[-1]))], axis=1)
        xi = path - ref
        fx, fv = (path[:, :N], path[:, N:]) if keep_states else (None, None)
    stop = int(res.stopped_at[0])
    div_t = float(setup.times[stop]) if stop >= 0 else None
    if div_t is not None:
        log.info("path diverged at t=%.4g", div_t)
    return Trajectory(setup.times[r], batch.xc[0, r], batch.vc[0, r], xd, vd, xi, fx, fv,
                      stop >= 0, div_t, mode)


def simulate_closed_loop(problem: Problem, schedule, cfg: SimConfig,
                         rng: np.random.Generator | int | None = None, *,
                         setup: PathSetup | None = None, raw_perception: bool | None = None,
                         keep_states: bool = True) -> Trajectory:
    """Followers under the intermittent pinning controller; lag errors derived afterwards.

    ``raw_perception`` (default: ``cfg.mode == "raw_perception"``) additionally
    feeds the coupling terms with the noisy perceived neighbour states.
    """
    if setup is None:
        setup = prepare_path(problem, schedule, cfg, rng)
    raw = cfg.mode == "raw_perception" if raw_perception is None else raw_perception
    mode = "raw_perception" if raw else "closed_loop"
    batch, res = _run_batch(problem, [setup], cfg, mode)
    return _trajectory(problem, setup, batch, res, cfg, mode, keep_states)


def simulate_error_sde(problem: Problem, schedule, cfg: SimConfig,
                       rng: np.random.Generator | int | None = None, *,
                       setup: PathSetup | None = None) -> Trajectory:
    """Integrate the lag error directly; follower states are rebuilt only to evaluate f."""
    if setup is None:
        setup = prepare_path(problem, schedule, cfg, rng)
    batch, res = _run_batch(problem, [setup], cfg, "error_sde")
    return _trajectory(problem, setup, batch, res, cfg, "error_sde")


def simulate(problem: Problem, schedule, cfg: SimConfig, rng=None, setup=None) -> Trajectory:
    if cfg.mode == "error_sde":
        return simulate_error_sde(problem, schedule, cfg, rng, setup=setup)
    return simulate_closed_loop(problem, schedule, cfg, rng, setup=setup)


# --------------------------------------------------------------------------- Monte Carlo


@dataclass
class MonteCarloResult:
    times: np.ndarray
    msq_pos: np.ndarray
    msq_vel: np.ndarray
    msq_xi: np.ndarray
    stderr_pos: np.ndarray
    stderr_vel: np.ndarray
    stderr_xi: np.ndarray
    trials: int
    used: int
    divergent: int
    divergence_times: list[float] = field(default_factory=list)

    @property
    def decay_ratio(self) -> float:
        return float(self.msq_xi[-1] / self.msq_xi[0])


FIXED_SCHEDULE_STREAM = 2**32 - 1
BATCH_SIZE = 32


def trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def monte_carlo(problem: Problem, schedule, cfg: SimConfig, batch_size: int = BATCH_SIZE) -> MonteCarloResult:
    """Ensemble mean-square lag errors over ``cfg.trials`` independent paths.

    ``schedule`` is either a fixed :class:`IntermittentSchedule` or a
    :class:`ScheduleSpec`; with a spec and ``cfg.fresh_schedule`` every trial
    draws its own schedule, otherwise one schedule is drawn from the master
    seed and shared. Trial ``i`` draws everything from its own stream
    ``(seed, i)``. Divergent paths are counted and left out of the averages.
    """
    if isinstance(schedule, ScheduleSpec) and not cfg.fresh_schedule:
        schedule = schedule.draw(cfg.horizon, trial_rng(cfg.seed, FIXED_SCHEDULE_STREAM))
    mode = "closed_loop" if cfg.mode == "closed_loop" else cfg.mode
    sq, div_times = [], []
    times = None
    for start in range(0, cfg.trials, batch_size):
        idx = range(start, min(cfg.trials, start + batch_size))
        setups = [prepare_path(problem, schedule, cfg, trial_rng(cfg.seed, i)) for i in idx]
        batch, res = _run_batch(problem, setups, cfg, mode, observe_kind="msq")
        if times is None:
            times = setups[0].times[setups[0].record]
        for b, s in enumerate(setups):
            stop = int(res.stopped_at[b])
            if stop >= 0:
                div_times.append(float(s.times[stop]))
            else:
                sq.append(res.path[b])
    m = len(sq)
    if m == 0:
        nan = np.full(times.shape, np.nan)
        return MonteCarloResult(times, nan, nan, nan, nan, nan, nan, cfg.trials, 0,
                                len(div_times), div_times)
    sq = np.array(sq)                  # (m, R, 2)
    pos, vel = sq[..., 0], sq[..., 1]
    tot = pos + vel

    def se(a):
        return a.std(axis=0, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(a.shape[1])

    if div_times:
        log.info("%d of %d trials diverged", len(div_times), cfg.trials)
    return MonteCarloResult(times, pos.mean(0), vel.mean(0), tot.mean(0),
                            se(pos), se(vel), se(tot), cfg.trials, m, len(div_times), div_times)


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    r2: float


def fit_decay_rate(mc: MonteCarloResult | tuple, window=None) -> DecayFit:
    """Least-squares slope of ``log msq_xi`` over ``window`` (default: latter half)."""
    if isinstance(mc, MonteCarloResult):
        t, y = mc.times, mc.msq_xi
    else:
        t, y = (np.asarray(a, dtype=float) for a in mc)
    if window is None:
        window = (t[0] + (t[-1] - t[0]) / 2, t[-1])
    a, b = window
    if a < t[0] - 1e-12 or b > t[-1] + 1e-12 or a >= b:
        raise ValueError(f"window {window} not inside the grid [{t[0]}, {t[-1]}]")
    sel = (t >= a - 1e-12) & (t <= b + 1e-12)
    ys = y[sel]
    if sel.sum() < 2 or not np.all(ys > 0):
        raise ValueError("need at least two positive values inside the window")
    ly = np.log(ys)
    slope, icpt = np.polyfit(t[sel], ly, 1)
    resid = ly - (slope * t[sel] + icpt)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return DecayFit(float(slope), float(icpt), float(r2))


# --------------------------------------------------------------------------- CSV export


def _fmt(x) -> str:
    return f"{x:.12e}"


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def trajectory_csvs(tr: Trajectory, out_dir, every: int = 1) -> list[Path]:
    """Write ``leader.csv``, ``followers.csv`` (closed loop only) and ``xi.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sel = slice(None, None, max(1, int(every)))
    t = tr.times[sel]
    N, n = tr.n_agents, tr.xi.shape[2]
    dims = range(1, n + 1)
    written = []
    lead = np.column_stack([t, tr.leader_x[sel], tr.leader_v[sel],
                            tr.leader_x_delayed[sel], tr.leader_v_delayed[sel]])
    hdr = (["t"] + [f"x0_{d}" for d in dims] + [f"v0_{d}" for d in dims]
           + [f"x0_lag_{d}" for d in dims] + [f"v0_lag_{d}" for d in dims])
    _write_rows(out / "leader.csv", hdr, lead)
    written.append(out / "leader.csv")
    agent_cols = [f"{i}_{d}" for i in range(1, N + 1) for d in dims]
    if tr.followers_x is not None:
        fol = np.column_stack([t, tr.followers_x[sel].reshape(len(t), -1),
                               tr.followers_v[sel].reshape(len(t), -1)])
        _write_rows(out / "followers.csv",
                    ["t"] + [f"x_{c}" for c in agent_cols] + [f"v_{c}" for c in agent_cols], fol)
        written.append(out / "followers.csv")
    xi = np.column_stack([t, tr.pos_error[sel].reshape(len(t), -1),
                          tr.vel_error[sel].reshape(len(t), -1)])
    _write_rows(out / "xi.csv",
                ["t"] + [f"xt_{c}" for c in agent_cols] + [f"vt_{c}" for c in agent_cols], xi)
    written.append(out / "xi.csv")
    return written


def msq_csv(mc: MonteCarloResult, path, every: int = 1) -> Path:
    sel = slice(None, None, max(1, int(every)))
    rows = np.column_stack([mc.times[sel], mc.msq_pos[sel], mc.msq_vel[sel],
                            mc.msq_xi[sel], mc.stderr_xi[sel]])
    _write_rows(path, ["t", "msq_pos", "msq_vel", "msq_xi", "stderr"], rows)
    return Path(path)
