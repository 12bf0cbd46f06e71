"""Intrinsic agent dynamics f(x, v) with declared Lipschitz constants.

Every evaluator is vectorized over leading axes: ``x`` and ``v`` have shape
``(..., dim)`` and the result has the same shape. A user plugin is any
callable ``f(x, v) -> array`` with that contract, wrapped in
:class:`IntrinsicDynamics` together with its declared constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DynamicsFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

LIPSCHITZ_SLACK = 1e-12


@dataclass(frozen=True)
class IntrinsicDynamics:
    name: str
    dim: int
    fn: DynamicsFn
    rho1: float
    rho2: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("state dimension must be at least 1")
        if self.rho1 < 0 or self.rho2 < 0:
            raise ValueError("Lipschitz constants must be nonnegative")

    def __call__(self, x, v) -> np.ndarray:
        return eval_f(self, x, v)

    def with_constants(self, rho1: float | None = None, rho2: float | None = None) -> "IntrinsicDynamics":
        return IntrinsicDynamics(
            self.name, self.dim, self.fn,
            self.rho1 if rho1 is None else float(rho1),
            self.rho2 if rho2 is None else float(rho2),
        )


def eval_f(d: IntrinsicDynamics, x, v) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != v.shape or x.ndim < 1 or x.shape[-1] != d.dim:
        raise ValueError(f"{d.name}: expected x, v of trailing dimension {d.dim}, "
                         f"got {x.shape} and {v.shape}")
    return d.fn(x, v)


CHUA_ALPHA = 9.0
CHUA_BETA = 100.0 / 7.0


# linear part of the Chua field in v (outer-region Jacobian)
_CHUA_LINEAR = np.array([[-CHUA_ALPHA * 2.0 / 7.0, CHUA_ALPHA, 0.0],
                         [1.0, -1.0, 1.0],
                         [0.0, -CHUA_BETA, 0.0]])


def _chua(x, v, corrected=True):
    out = v @ _CHUA_LINEAR.T
    if corrected:
        v1 = v[..., 0]
        out[..., 0] -= CHUA_ALPHA * (3.0 / 14.0) * (np.abs(v1 + 1.0) - np.abs(v1 - 1.0))
    # without the kink (|v1 + 1| - |v1 + 1| read literally) the field is linear
    return out


def chua_jacobians(corrected: bool = True) -> list[np.ndarray]:
    """Jacobians d f / d v on the linear pieces of the Chua field."""
    slopes = [3.0 / 7.0, 0.0] if corrected else [0.0]
    return [np.array([[CHUA_ALPHA * (-2.0 / 7.0 - s), CHUA_ALPHA, 0.0],
                      [1.0, -1.0, 1.0],
                      [0.0, -CHUA_BETA, 0.0]]) for s in slopes]


def chua_exact_rho2(corrected: bool = True) -> float:
    """Euclidean Lipschitz constant in v: the largest spectral norm over the pieces.

    The field is continuous and piecewise linear, so its Lipschitz constant on
    the whole space is the largest operator norm of its piece Jacobians.
    """
    return max(float(np.linalg.norm(j, 2)) for j in chua_jacobians(corrected))


# Customary constants for the Chua network example: rho2 = ||df/dv|| = 14.28.
CHUA_PAPER_RHO = (0.0, 14.28)


def builtin_chua(corrected: bool = True) -> IntrinsicDynamics:
    """Chua circuit acting on the velocity states (position does not enter).

    The declared constants are the customary ones. They are *not* a valid
    Euclidean Lipschitz bound (see :func:`chua_exact_rho2`); use
    ``builtin_chua().with_constants(rho2=chua_exact_rho2())`` where a sound
    constant is needed.
    """
    name = "chua" if corrected else "chua_linear"
    return IntrinsicDynamics(name, 3, lambda x, v: _chua(x, v, corrected), *CHUA_PAPER_RHO)


def _pendulum(x, v):
    return -np.sin(x) - 0.15 * v - 0.2


def builtin_pendulum() -> IntrinsicDynamics:
    return IntrinsicDynamics("pendulum", 1, _pendulum, 1.0, 0.15)


def builtin_zero(dim: int = 1) -> IntrinsicDynamics:
    return IntrinsicDynamics("zero", dim, lambda x, v: np.zeros_like(v), 0.0, 0.0)


CATALOG: dict[str, Callable[..., IntrinsicDynamics]] = {
    "chua": builtin_chua,
    "chua_linear": lambda: builtin_chua(corrected=False),
    "pendulum": builtin_pendulum,
    "zero": builtin_zero,
}


def get_dynamics(name: str, dim: int | None = None, rho1: float | None = None,
                 rho2: float | None = None) -> IntrinsicDynamics:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown dynamics {name!r}; choose from {sorted(CATALOG)}") from None
    d = factory(dim) if name == "zero" and dim is not None else factory()
    return d.with_constants(rho1, rho2)


@dataclass(frozen=True)
class LipschitzAudit:
    passed: bool
    max_ratio: float
    worst_margin: float
    violations: int
    samples: int


def audit_lipschitz(d: IntrinsicDynamics, samples: int = 10_000, radius: float = 10.0,
                    rng: np.random.Generator | int | None = None) -> LipschitzAudit:
    """Randomized check of ||f(x1,v1) - f(x2,v2)|| <= rho1 ||dx|| + rho2 ||dv||.

    Points are drawn uniformly in the ball of ``radius`` (in the joint (x, v)
    space). ``max_ratio`` is the largest observed
    ``||df|| / (rho1 ||dx|| + rho2 ||dv||)`` (0 when f does not move);
    ``worst_margin`` is the largest ``||df|| - bound``.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(rng)
    m = 2 * d.dim

    def ball(k):
        z = rng.standard_normal((k, m))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        r = radius * rng.uniform(size=(k, 1)) ** (1.0 / m)
        return z * r

    p, q = ball(samples), ball(samples)
    # half the pairs are local perturbations, which probe the slopes sharply
    local = samples // 2
    q[:local] = p[:local] + 1e-3 * radius * rng.standard_normal((local, m))
    x1, v1 = p[:, :d.dim], p[:, d.dim:]
    x2, v2 = q[:, :d.dim], q[:, d.dim:]
    df = np.linalg.norm(d(x1, v1) - d(x2, v2), axis=1)
    bound = d.rho1 * np.linalg.norm(x1 - x2, axis=1) + d.rho2 * np.linalg.norm(v1 - v2, axis=1)
    margin = df - bound
    violations = int(np.count_nonzero(margin > LIPSCHITZ_SLACK))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(df > 0, df / bound, 0.0)
    return LipschitzAudit(
        passed=violations == 0,
        max_ratio=float(np.max(ratio)),
        worst_margin=float(np.max(margin)),
        violations=violations,
        samples=samples,
    )
