"""Follower network: adjacency, Laplacians, pinning and perception-noise gains.

Edge convention: ``a[i, j] > 0`` means follower ``i`` receives information
from follower ``j``. Information therefore flows ``j -> i``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np


class GraphError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class WeightedDigraph:
    a: np.ndarray

    def __post_init__(self):
        a = _frozen(self.a)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise GraphError(f"adjacency must be a non-empty square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise GraphError("adjacency contains non-finite weights")
        if np.any(a < 0):
            raise GraphError("adjacency weights must be nonnegative")
        if np.any(np.diag(a) != 0):
            raise GraphError("adjacency must have a zero diagonal")
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        """Agents that ``i`` receives from."""
        return np.flatnonzero(self.a[i] > 0)


@dataclass(frozen=True)
class PinningConfig:
    kappa: np.ndarray

    def __post_init__(self):
        k = _frozen(self.kappa)
        if k.ndim != 1:
            raise GraphError("kappa must be a vector")
        if np.any(k < 0) or not np.all(np.isfinite(k)):
            raise GraphError("pinning gains must be finite and nonnegative")
        object.__setattr__(self, "kappa", k)

    @property
    def pinned(self) -> np.ndarray:
        return np.flatnonzero(self.kappa > 0)

    @property
    def ell(self) -> int:
        return int(np.count_nonzero(self.kappa > 0))

    @property
    def K(self) -> np.ndarray:
        return np.diag(self.kappa)

    @classmethod
    def single(cls, n: int, agent: int, gain: float) -> "PinningConfig":
        k = np.zeros(n)
        k[agent] = gain
        return cls(k)


@dataclass(frozen=True)
class NoiseTopology:
    sigma: np.ndarray

    def __post_init__(self):
        s = _frozen(self.sigma)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise GraphError("sigma must be square")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise GraphError("noise gains must be finite and nonnegative")
        if np.any(np.diag(s) != 0):
            raise GraphError("sigma must have a zero diagonal")
        object.__setattr__(self, "sigma", s)

    @classmethod
    def from_adjacency(cls, g: WeightedDigraph) -> "NoiseTopology":
        return cls(g.a)

    def check_support(self, g: WeightedDigraph) -> None:
        """Noise may only live on existing links, and every link carries noise."""
        if self.sigma.shape != g.a.shape:
            raise GraphError("sigma and adjacency shapes differ")
        if np.any((self.sigma > 0) != (g.a > 0)):
            raise GraphError("sigma_ij > 0 must hold exactly where a_ij > 0")


def symmetric_part(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"symmetric_part needs a square matrix, got shape {m.shape}")
    return (m + m.T) / 2


def laplacian(g: WeightedDigraph) -> np.ndarray:
    a = g.a
    return np.diag(a.sum(axis=1)) - a


def noise_matrix(t: NoiseTopology, g: WeightedDigraph | None = None) -> np.ndarray:
    """``d_ij = -sigma_ij`` off the diagonal, row sums on it.

    When ``g`` is given, sigma entries off the adjacency support are rejected.
    """
    s = t.sigma
    if g is not None:
        if s.shape != g.a.shape:
            raise GraphError("sigma and adjacency shapes differ")
        if np.any((s > 0) & (g.a == 0)):
            raise GraphError("sigma_ij > 0 on a pair with a_ij = 0")
    return np.diag(s.sum(axis=1)) - s


@dataclass(frozen=True)
class LaplacianSet:
    L: np.ndarray
    K: np.ndarray
    D: np.ndarray
    Ltilde: np.ndarray = field(init=False)
    Ls: np.ndarray = field(init=False)
    Ltilde_s: np.ndarray = field(init=False)
    Ks: np.ndarray = field(init=False)

    def __post_init__(self):
        L, K, D = (_frozen(m) for m in (self.L, self.K, self.D))
        if not (L.shape == K.shape == D.shape) or L.shape[0] != L.shape[1]:
            raise GraphError("L, K, D must be square and of equal size")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "Ltilde", _frozen(L + K))
        object.__setattr__(self, "Ls", _frozen(symmetric_part(L)))
        object.__setattr__(self, "Ltilde_s", _frozen(symmetric_part(L + K)))
        object.__setattr__(self, "Ks", _frozen(symmetric_part(K)))

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @classmethod
    def build(cls, g: WeightedDigraph, p: PinningConfig, t: NoiseTopology | None = None) -> "LaplacianSet":
        if p.kappa.shape[0] != g.n:
            raise GraphError(f"kappa has length {p.kappa.shape[0]}, graph has {g.n} agents")
        t = t if t is not None else NoiseTopology.from_adjacency(g)
        return cls(L=laplacian(g), K=p.K, D=noise_matrix(t, g))


def has_leader_spanning_tree(g: WeightedDigraph, p: PinningConfig) -> bool:
    """BFS from the leader over the augmented graph.

    The leader reaches every pinned agent; agent ``i`` is reached from ``j``
    whenever ``a[i, j] > 0``.
    """
    if p.kappa.shape[0] != g.n:
        raise GraphError("kappa length does not match graph size")
    seen = np.zeros(g.n, dtype=bool)
    queue = deque(int(i) for i in p.pinned)
    seen[p.pinned] = True
    out = g.a.T > 0  # out[j, i]: j -> i
    while queue:
        j = queue.popleft()
        for i in np.flatnonzero(out[j] & ~seen):
            seen[i] = True
            queue.append(int(i))
    return bool(seen.all())


def small_world_digraph(n: int, k: int = 4, p: float = 0.1, seed: int | None = 0,
                        weight: float = 1.0) -> WeightedDigraph:
    """Watts-Strogatz small world with every undirected edge kept in both directions."""
    if not (isinstance(n, (int, np.integer)) and isinstance(k, (int, np.integer))):
        raise GraphError("n and k must be integers")
    if k < 2 or k % 2 or n <= k:
        raise GraphError(f"need n > k >= 2 with k even, got n={n}, k={k}")
    if not 0.0 <= p <= 1.0:
        raise GraphError(f"rewiring probability must lie in [0, 1], got {p}")
    if weight <= 0:
        raise GraphError("edge weight must be positive")
    ug = nx.watts_strogatz_graph(int(n), int(k), float(p), seed=seed)
    a = nx.to_numpy_array(ug, nodelist=range(n), weight=None) * weight
    return WeightedDigraph(a)


def load_matrix(path) -> np.ndarray:
    """Plain-text matrix: first line ``n``, then ``n`` rows of ``n`` numbers."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise GraphError(f"{path}: empty matrix file")
    try:
        if len(lines[0]) != 1:
            raise ValueError
        n = int(lines[0][0])
        rows = [[float(x) for x in row] for row in lines[1:]]
    except ValueError:
        raise GraphError(f"{path}: malformed matrix file") from None
    if n < 1 or len(rows) != n or any(len(r) != n for r in rows):
        raise GraphError(f"{path}: expected {n} rows of {n} values")
    return np.array(rows)


def save_matrix(path, m) -> None:
    m = np.asarray(m, dtype=float)
    rows = [" ".join(f"{x:.17g}" for x in row) for row in m]
    Path(path).write_text(f"{m.shape[0]}\n" + "\n".join(rows) + "\n")


def load_graph(path) -> WeightedDigraph:
    return WeightedDigraph(load_matrix(path))


def save_graph(path, g: WeightedDigraph) -> None:
    save_matrix(path, g.a)


def adjacency_from_laplacian(L) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    a = -L.copy()
    np.fill_diagonal(a, 0.0)
    return a


# Follower Laplacian of the 9-agent Chua network (agents 1..9 -> rows 0..8).
EXAMPLE1_LAPLACIAN = np.array([
    [0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0],
    [-3, 0, 3, 0, 0, 0, 0, 0, 0],
    [-1, -3, 0, 6, -2, 0, 0, 0, 0],
    [0, -4, 0, 0, 4, 0, 0, 0, 0],
    [0, 0, -3, 0, 0, 3, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, -1, 0],
    [0, 0, 0, -2, 0, 0, 0, 2, 0],
    [0, 0, 0, 0, -3, 0, 0, 0, 3],
], dtype=float)
EXAMPLE1_LAPLACIAN.setflags(write=False)


def example1_graph() -> WeightedDigraph:
    return WeightedDigraph(adjacency_from_laplacian(EXAMPLE1_LAPLACIAN))
