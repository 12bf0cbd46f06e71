"""Intermittent control schedules: active on [t_k, s_k], failed on (s_k, t_{k+1})."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TOL = 1e-12


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class IntermittentSchedule:
    """Cycle ``k`` spans ``[starts[k], ends[k])`` and is active on ``[starts[k], switch_off[k]]``.

    The last cycle may be truncated at ``horizon``; ``truncated`` records that.
    """
    starts: np.ndarray
    switch_off: np.ndarray
    ends: np.ndarray
    theta: float
    delta: float
    horizon: float
    truncated: bool = False

    def __post_init__(self):
        for name in ("starts", "switch_off", "ends"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        validate(self)

    @property
    def cycles(self) -> list[tuple[float, float, float]]:
        return list(zip(self.starts.tolist(), self.switch_off.tolist(), self.ends.tolist()))

    @property
    def breakpoints(self) -> np.ndarray:
        """All switching instants strictly inside (0, horizon)."""
        pts = np.concatenate([self.starts, self.switch_off, self.ends])
        pts = pts[(pts > 0) & (pts < self.horizon)]
        return np.unique(pts)

    def active_duration(self) -> float:
        return float(np.sum(self.switch_off - self.starts))


def validate(s: IntermittentSchedule) -> None:
    t, sk, e = s.starts, s.switch_off, s.ends
    if not (t.shape == sk.shape == e.shape) or t.size == 0:
        raise ScheduleError("schedule needs at least one cycle and equal-length arrays")
    if not 0 < s.theta <= s.delta:
        raise ScheduleError(f"need 0 < theta <= delta, got theta={s.theta}, delta={s.delta}")
    if abs(t[0]) > TOL:
        raise ScheduleError("first cycle must start at t = 0")
    if np.any(sk <= t) or np.any(e < sk - TOL):
        raise ScheduleError("each cycle needs t_k < s_k <= t_{k+1}")
    if np.any(np.abs(t[1:] - e[:-1]) > TOL):
        raise ScheduleError("cycles must be contiguous")
    if abs(e[-1] - s.horizon) > TOL:
        raise ScheduleError("cycles must cover [0, horizon]")
    full = slice(None, -1) if s.truncated else slice(None)
    if np.any(sk[full] - t[full] < s.theta - TOL):
        raise ScheduleError("an active duration is shorter than theta")
    if np.any(e[full] - t[full] > s.delta + TOL):
        raise ScheduleError("a cycle is longer than delta")


def generate_random(theta: float, delta: float, horizon: float,
                    rng: np.random.Generator | int | None = None) -> IntermittentSchedule:
    """Cycle length ~ U[theta, delta], active part ~ U[theta, cycle length]."""
    if not 0 < theta < delta:
        raise ScheduleError(f"need 0 < theta < delta, got theta={theta}, delta={delta}")
    if horizon <= 0:
        raise ScheduleError("horizon must be positive")
    rng = np.random.default_rng(rng)
    starts, offs, ends = [], [], []
    t = 0.0
    truncated = False
    while t < horizon - TOL:
        length = rng.uniform(theta, delta)
        active = rng.uniform(theta, length)
        end = t + length
        off = t + active
        if end > horizon - TOL:
            truncated = end > horizon + TOL
            end = horizon
            off = min(off, horizon)
        starts.append(t)
        offs.append(off)
        ends.append(end)
        t = end
    return IntermittentSchedule(np.array(starts), np.array(offs), np.array(ends),
                                theta, delta, horizon, truncated)


def always_active(horizon: float) -> IntermittentSchedule:
    if horizon <= 0:
        raise ScheduleError("horizon must be positive")
    return IntermittentSchedule(np.array([0.0]), np.array([horizon]), np.array([horizon]),
                                horizon, horizon, horizon)


def from_cycles(cycles, theta=None, delta=None, horizon=None, truncated=False) -> IntermittentSchedule:
    """Build from ``(t_k, s_k, t_{k+1})`` triples; bounds default to the empirical ones."""
    c = np.asarray(cycles, dtype=float).reshape(-1, 3)
    horizon = float(c[-1, 2]) if horizon is None else horizon
    full = c[:-1] if truncated else c
    if theta is None:
        theta = float(np.min(full[:, 1] - full[:, 0])) if len(full) else horizon
    if delta is None:
        delta = float(np.max(full[:, 2] - full[:, 0])) if len(full) else horizon
    return IntermittentSchedule(c[:, 0], c[:, 1], c[:, 2], theta, delta, horizon, truncated)


def is_active(s: IntermittentSchedule, t: float) -> bool:
    if t < -TOL or t > s.horizon + TOL:
        raise ScheduleError(f"t={t} outside [0, {s.horizon}]")
    k = int(np.searchsorted(s.starts, t, side="right")) - 1
    k = max(k, 0)
    if t <= s.switch_off[k] + TOL:
        return True
    # t may equal the start of the next cycle only through rounding
    return k + 1 < s.starts.size and abs(t - s.starts[k + 1]) <= TOL


def active_mask(s: IntermittentSchedule, times: np.ndarray) -> np.ndarray:
    """Vectorized ``is_active`` for interior points (boundaries count as active)."""
    times = np.asarray(times, dtype=float)
    k = np.clip(np.searchsorted(s.starts, times, side="right") - 1, 0, None)
    return times <= s.switch_off[k] + TOL


@dataclass(frozen=True)
class ScheduleStats:
    theta_emp: float
    delta_emp: float
    psi_bound: float
    psi_emp: float


def stats(s: IntermittentSchedule) -> ScheduleStats:
    """Empirical bounds; a truncated final cycle is excluded unless it is the only one."""
    t, sk, e = s.starts, s.switch_off, s.ends
    if s.truncated and t.size > 1:
        t, sk, e = t[:-1], sk[:-1], e[:-1]
    active = sk - t
    length = e - t
    theta_emp = float(active.min())
    delta_emp = float(length.max())
    psi_emp = float(np.max((e - sk) / length))
    return ScheduleStats(theta_emp, delta_emp, 1.0 - theta_emp / delta_emp, psi_emp)


def to_csv(s: IntermittentSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "t_k", "s_k", "t_k1"])
    for k, (a, b, c) in enumerate(s.cycles):
        w.writerow([k, f"{a:.17g}", f"{b:.17g}", f"{c:.17g}"])
    return buf.getvalue()


def save_csv(path, s: IntermittentSchedule) -> None:
    Path(path).write_text(to_csv(s))


def load_csv(path, theta=None, delta=None, truncated=False) -> IntermittentSchedule:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ScheduleError(f"{path}: no cycles")
    cycles = [(float(r["t_k"]), float(r["s_k"]), float(r["t_k1"])) for r in rows]
    return from_cycles(cycles, theta, delta, truncated=truncated)
