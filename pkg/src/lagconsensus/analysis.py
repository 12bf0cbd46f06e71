"""Lyapunov certificate for mean-square lag consensus.

With ``V(xi) = 1/2 xi^T (P (x) I_n) xi`` the verdict rests on two scalar tests:

    (i)  gamma = 2 lambda_min(R1) - lambda_max(U^T P U) >= 0
    (ii) mu1 theta - mu2 (delta - theta) > 0,
         mu1 = gamma / lambda_max(P2),  mu2 = 2 lambda_max(R2) / lambda_min(P1)

The conditions are sufficient only; when the sandwich bound on ``V`` cannot
hold (``lambda_min(P1) <= 0`` or ``lambda_max(P2) <= 0``) the certificate is
reported as inapplicable rather than failed.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

import numpy as np

from .errorsys import CouplingGains, NoiseIntensities, build_system
from .graph import LaplacianSet, PinningConfig, symmetric_part

SYM_TOL = 1e-10
IDENTITY_TOL = 1e-10


class AssemblyError(RuntimeError):
    """Two routes to the same matrix disagree; indicates a construction bug."""


def _eigvalsh(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * scale:
        raise AssemblyError(f"{what} is not symmetric")
    return np.linalg.eigvalsh(symmetric_part(m))


def _blocks(a, b, c, d):
    return np.block([[a, b], [c, d]])


def build_P(ls: LaplacianSet, g: CouplingGains) -> np.ndarray:
    I = np.eye(ls.n)
    return _blocks(2 * g.c1 * g.c2 * ls.Ltilde_s, g.c1 * I, g.c1 * I, g.c2 * I)


def _P_with_scalar(ls, g, lam):
    I = np.eye(ls.n)
    return _blocks(2 * g.c1 * g.c2 * lam * I, g.c1 * I, g.c1 * I, g.c2 * I)


def build_bounds(ls: LaplacianSet, g: CouplingGains) -> tuple[np.ndarray, np.ndarray]:
    """(P1, P2): the top-left block of P replaced by lambda_min / lambda_max of sym(L~) times I."""
    lam = np.linalg.eigvalsh(ls.Ltilde_s)
    return _P_with_scalar(ls, g, lam[0]), _P_with_scalar(ls, g, lam[-1])


def build_deltas(g: CouplingGains, rho1: float, rho2: float) -> tuple[float, float, float]:
    if rho1 < 0 or rho2 < 0:
        raise ValueError("Lipschitz constants must be nonnegative")
    d3 = (g.c1 * rho2 + g.c2 * rho1) / 2
    return g.c1 * rho1 + d3, g.c2 * rho2 + d3, d3


def build_R1_R2_S(ls: LaplacianSet, g: CouplingGains, deltas, rho1: float, rho2: float):
    """Returns (R1, R2, S).

    R2 carries ``c1 c2 sym(K)`` off the diagonal, which is what
    ``S + sym(P H2)`` evaluates to. See :func:`R2_doubled_pinning` for the variant
    with ``2 c1 c2 sym(K)``.
    """
    d1, d2, d3 = deltas
    c1, c2 = g.c1, g.c2
    I, Z = np.eye(ls.n), np.zeros((ls.n, ls.n))
    R1 = _blocks(c1 ** 2 * ls.Ltilde_s - d1 * I, Z, Z, c2 ** 2 * ls.Ltilde_s - (c1 + d2) * I)
    off = c1 * c2 * ls.Ks + d3 * I
    R2 = _blocks(c1 * rho1 * I - c1 ** 2 * ls.Ls, off, off.T, (c1 + c2 * rho2) * I - c2 ** 2 * ls.Ls)
    S = _blocks(c1 * rho1 * I, d3 * I, d3 * I, c2 * rho2 * I)
    return R1, R2, S


def R2_doubled_pinning(ls: LaplacianSet, g: CouplingGains, deltas, rho1: float, rho2: float) -> np.ndarray:
    """R2 with ``2 c1 c2 sym(K)`` off the diagonal; differs from ``S + sym(P H2)`` by ``c1 c2 sym(K)``."""
    _, d2, d3 = deltas
    c1, c2 = g.c1, g.c2
    I = np.eye(ls.n)
    off = 2 * c1 * c2 * ls.Ks + d3 * I
    return _blocks(c1 * rho1 * I - c1 ** 2 * ls.Ls, off, off.T, (c1 + c2 * rho2) * I - c2 ** 2 * ls.Ls)


def Q_block_form(ls: LaplacianSet, g: CouplingGains) -> np.ndarray:
    Z = np.zeros((ls.n, ls.n))
    return _blocks(g.c1 ** 2 * ls.Ltilde_s, Z, Z, g.c2 ** 2 * ls.Ltilde_s - g.c1 * np.eye(ls.n))


def build_Q(ls: LaplacianSet, g: CouplingGains, noise: NoiseIntensities | None = None) -> np.ndarray:
    """``-sym(P H1)``, cross-checked against its closed block form."""
    sysm = build_system(ls, g, noise or NoiseIntensities())
    Q = -symmetric_part(build_P(ls, g) @ sysm.H1)
    err = np.max(np.abs(Q - Q_block_form(ls, g)))
    if err > IDENTITY_TOL * max(1.0, np.max(np.abs(Q))):
        raise AssemblyError(f"Q definition and block form differ by {err:.3e}")
    return Q


def identity_residuals(ls: LaplacianSet, g: CouplingGains, rho1: float, rho2: float) -> dict[str, float]:
    """Max-abs residuals of Q = -sym(P H1) (block form) and R2 = S + sym(P H2)."""
    sysm = build_system(ls, g, NoiseIntensities())
    P = build_P(ls, g)
    deltas = build_deltas(g, rho1, rho2)
    _, R2, S = build_R1_R2_S(ls, g, deltas, rho1, rho2)
    q_def = -symmetric_part(P @ sysm.H1)
    return {
        "Q": float(np.max(np.abs(q_def - Q_block_form(ls, g)))),
        "R2": float(np.max(np.abs(R2 - S - symmetric_part(P @ sysm.H2)))),
        "R2_doubled": float(np.max(np.abs(R2_doubled_pinning(ls, g, deltas, rho1, rho2)
                                          - S - symmetric_part(P @ sysm.H2)))),
    }


@dataclass(frozen=True)
class LyapunovCertificate:
    P: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    Q: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    S: np.ndarray
    UPU: np.ndarray
    delta1: float
    delta2: float
    delta3: float
    gamma: float
    mu1_bar: float
    mu2_bar: float
    mu_breve: float
    cond_i: bool
    cond_ii: bool
    margin_ii: float
    applicable: bool
    lam_min_P: float
    lam_min_P1: float
    lam_max_P2: float
    lam_min_R1: float
    lam_max_R2: float
    lam_min_UPU: float
    lam_max_UPU: float
    lam_min_Ltilde_s: float
    lam_max_Ltilde_s: float
    theta: float
    delta: float
    diagnostics: tuple[str, ...] = ()

    @property
    def certified(self) -> bool:
        return self.applicable and self.cond_i and self.cond_ii

    @property
    def verdict(self) -> str:
        if not self.applicable:
            return "inapplicable"
        return "certified" if self.certified else "failed"

    def scalars(self) -> dict[str, float | bool | str]:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, (bool, float, int, np.floating)):
                out[f.name] = val if isinstance(val, bool) else float(val)
        out["verdict"] = self.verdict
        return out

    def report(self) -> str:
        lines = ["Lyapunov certificate", "===================="]
        for key, val in self.scalars().items():
            lines.append(f"{key:>18s} = {val:.10g}" if isinstance(val, float) else f"{key:>18s} = {val}")
        for d in self.diagnostics:
            lines.append(f"note: {d}")
        return "\n".join(lines) + "\n"

    def csv_row(self, header: bool = True) -> str:
        sc = self.scalars()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(sc.keys())
        w.writerow([f"{v:.12e}" if isinstance(v, float) else v for v in sc.values()])
        return buf.getvalue()


def certify(ls: LaplacianSet, g: CouplingGains, ni: NoiseIntensities, rho1: float, rho2: float,
            theta: float, delta: float) -> LyapunovCertificate:
    if not 0 < theta <= delta:
        raise ValueError(f"need 0 < theta <= delta, got {theta}, {delta}")
    sysm = build_system(ls, g, ni)
    P = build_P(ls, g)
    P1, P2 = build_bounds(ls, g)
    deltas = build_deltas(g, rho1, rho2)
    R1, R2, S = build_R1_R2_S(ls, g, deltas, rho1, rho2)
    Q = build_Q(ls, g, ni)
    UPU = symmetric_part(sysm.U.T @ P @ sysm.U)

    lam_lt = np.linalg.eigvalsh(ls.Ltilde_s)
    lam_P = _eigvalsh(P, "P")
    lam_P1 = _eigvalsh(P1, "P1")
    lam_P2 = _eigvalsh(P2, "P2")
    lam_R1 = _eigvalsh(R1, "R1")
    lam_R2 = _eigvalsh(R2, "R2")
    lam_U = _eigvalsh(UPU, "U^T P U")

    notes = []
    gamma = 2 * lam_R1[0] - lam_U[-1]
    applicable = lam_P1[0] > 0 and lam_P2[-1] > 0
    if lam_P1[0] <= 0:
        notes.append(f"lambda_min(P1) = {lam_P1[0]:.4g} <= 0: lower bound on V fails")
    if lam_P2[-1] <= 0:
        notes.append(f"lambda_max(P2) = {lam_P2[-1]:.4g} <= 0: upper bound on V fails")
    if lam_U[0] < -1e-12:
        notes.append("U^T P U is indefinite")
    if lam_P[0] <= 0:
        notes.append("P is not positive definite")

    mu1 = gamma / lam_P2[-1] if lam_P2[-1] != 0 else np.nan
    mu2 = 2 * lam_R2[-1] / lam_P1[0] if lam_P1[0] != 0 else np.nan
    margin = mu1 * theta - mu2 * (delta - theta)
    return LyapunovCertificate(
        P=P, P1=P1, P2=P2, Q=Q, R1=R1, R2=R2, S=S, UPU=UPU,
        delta1=deltas[0], delta2=deltas[1], delta3=deltas[2],
        gamma=float(gamma), mu1_bar=float(mu1), mu2_bar=float(mu2),
        mu_breve=float(min(mu1, mu2)),
        cond_i=bool(gamma >= 0), cond_ii=bool(margin > 0), margin_ii=float(margin),
        applicable=bool(applicable),
        lam_min_P=float(lam_P[0]), lam_min_P1=float(lam_P1[0]), lam_max_P2=float(lam_P2[-1]),
        lam_min_R1=float(lam_R1[0]), lam_max_R2=float(lam_R2[-1]),
        lam_min_UPU=float(lam_U[0]), lam_max_UPU=float(lam_U[-1]),
        lam_min_Ltilde_s=float(lam_lt[0]), lam_max_Ltilde_s=float(lam_lt[-1]),
        theta=float(theta), delta=float(delta), diagnostics=tuple(notes),
    )


def lyapunov_value(P: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """``V = 1/2 xi^T (P (x) I_n) xi`` for canonical states of shape ``(..., 2N, n)``."""
    xi = np.asarray(xi, dtype=float)
    return 0.5 * np.einsum("...ia,ij,...ja->...", xi, P, xi)


def check_sandwich(P, P1, P2, samples: int = 10_000, rng=None, n: int = 1,
                   slack: float = 1e-10) -> bool:
    """Random check of 1/2 lmin(P1)|xi|^2 <= V(xi) <= 1/2 lmax(P2)|xi|^2."""
    rng = np.random.default_rng(rng)
    xi = rng.standard_normal((samples, P.shape[0], n))
    V = lyapunov_value(P, xi)
    sq = np.sum(xi ** 2, axis=(1, 2))
    lo = 0.5 * np.linalg.eigvalsh(symmetric_part(P1))[0] * sq
    hi = 0.5 * np.linalg.eigvalsh(symmetric_part(P2))[-1] * sq
    tol = slack * np.maximum(1.0, sq)
    return bool(np.all(lo <= V + tol) and np.all(V <= hi + tol))


@dataclass(frozen=True)
class GainSearch:
    kappa: float | None
    grid: np.ndarray
    gamma: np.ndarray
    margin: np.ndarray
    verdicts: tuple[str, ...]


def search_feasible_gain(graph, pinned, g: CouplingGains, ni: NoiseIntensities,
                         rho1: float, rho2: float, kappa_grid, theta: float, delta: float,
                         sigma=None) -> GainSearch:
    """Uniform pinning gain over ``pinned`` agents; first grid value that certifies."""
    grid = np.asarray(kappa_grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("kappa_grid must be ascending")
    gam, marg, verdicts = [], [], []
    found = None
    for k in grid:
        kap = np.zeros(graph.n)
        kap[list(pinned)] = k
        cert = certify(LaplacianSet.build(graph, PinningConfig(kap), sigma), g, ni, rho1, rho2, theta, delta)
        gam.append(cert.gamma)
        marg.append(cert.margin_ii)
        verdicts.append(cert.verdict)
        if found is None and cert.certified:
            found = float(k)
    return GainSearch(found, grid, np.array(gam), np.array(marg), tuple(verdicts))
