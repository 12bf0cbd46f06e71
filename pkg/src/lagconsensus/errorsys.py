"""Piecewise lag-error SDE.

    active:    dxi = (F_tau + (H1 (x) I_n) xi) dt - (U (x) I_n) xi dW
    inactive:  dxi = (F_tau + (H2 (x) I_n) xi) dt

The canonical state layout is a ``(2N, n)`` array: rows ``0..N-1`` hold the
position errors of agents 1..N, rows ``N..2N-1`` their velocity errors. In
that layout ``(H (x) I_n) xi`` is simply ``H @ xi``. :func:`to_interleaved`
and :func:`from_interleaved` convert to the per-agent stacking
``(x1, v1, x2, v2, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import IntrinsicDynamics
from .graph import LaplacianSet


@dataclass(frozen=True)
class CouplingGains:
    c1: float
    c2: float

    def __post_init__(self):
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("coupling gains must be nonnegative")


@dataclass(frozen=True)
class NoiseIntensities:
    beta1: float = 0.0
    beta2: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.beta1) and np.isfinite(self.beta2)):
            raise ValueError("noise intensities must be finite")


def _block(a, b, c, d) -> np.ndarray:
    return np.block([[a, b], [c, d]])


@dataclass(frozen=True)
class SystemMatrices:
    H1: np.ndarray
    H2: np.ndarray
    U: np.ndarray
    D: np.ndarray
    Ltilde: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.D.shape[0]


def build_system(ls: LaplacianSet, g: CouplingGains, ni: NoiseIntensities) -> SystemMatrices:
    N = ls.n
    Z, I = np.zeros((N, N)), np.eye(N)
    mats = dict(
        H1=_block(Z, I, -g.c1 * ls.Ltilde, -g.c2 * ls.Ltilde),
        H2=_block(Z, I, -g.c1 * ls.L, -g.c2 * ls.L),
        U=_block(Z, Z, ni.beta1 * ls.D, ni.beta2 * ls.D),
        D=np.array(ls.D),
        Ltilde=np.array(ls.Ltilde),
    )
    for m in mats.values():
        m.setflags(write=False)
    return SystemMatrices(**mats)


def _check_state(sys: SystemMatrices, xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        xi = xi[:, None]
    if xi.shape[0] != 2 * sys.n_agents:
        raise ValueError(f"state has {xi.shape[0]} rows, expected {2 * sys.n_agents}")
    return xi


def stacked_nonlinearity(d: IntrinsicDynamics, x, v, x0_delayed, v0_delayed) -> np.ndarray:
    """``F_tau``: zeros on the position rows, ``f(x_i, v_i) - f(x0(t-tau), v0(t-tau))`` below.

    ``x``, ``v`` have shape ``(N, n)``; the delayed leader state has shape ``(n,)``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape or x.ndim != 2:
        raise ValueError("follower states must be (N, n) arrays of equal shape")
    lead = d(np.asarray(x0_delayed, dtype=float), np.asarray(v0_delayed, dtype=float))
    return np.vstack([np.zeros_like(x), d(x, v) - lead])


def drift(sys: SystemMatrices, f_tau, xi, active: bool) -> np.ndarray:
    xi = _check_state(sys, xi)
    H = sys.H1 if active else sys.H2
    return np.asarray(f_tau, dtype=float).reshape(xi.shape) + H @ xi


def diffusion(sys: SystemMatrices, xi, active: bool) -> np.ndarray:
    """Coefficient of the single scalar Wiener increment."""
    xi = _check_state(sys, xi)
    if not active:
        return np.zeros_like(xi)
    return -(sys.U @ xi)


def kron_apply(H: np.ndarray, xi_flat: np.ndarray, n: int) -> np.ndarray:
    """Reference ``(H (x) I_n) xi`` through an explicit Kronecker product."""
    return np.kron(H, np.eye(n)) @ np.asarray(xi_flat, dtype=float)


def to_interleaved(xi: np.ndarray) -> np.ndarray:
    """Canonical ``(2N, n)`` -> flat ``(x1, v1, ..., xN, vN)`` of length ``2Nn``."""
    xi = np.asarray(xi)
    N = xi.shape[0] // 2
    return np.stack([xi[:N], xi[N:]], axis=1).reshape(-1)


def from_interleaved(flat: np.ndarray, n_agents: int) -> np.ndarray:
    flat = np.asarray(flat)
    per = flat.reshape(n_agents, 2, -1)
    return np.vstack([per[:, 0], per[:, 1]])
