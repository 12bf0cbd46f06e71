import numpy as np
from hypothesis import given, settings, strategies as st

from lagconsensus.dynamics import builtin_pendulum, builtin_zero
from lagconsensus.errorsys import (
    CouplingGains, NoiseIntensities, build_system, diffusion, drift, from_interleaved, kron_apply,
    stacked_nonlinearity, to_interleaved,
)
from lagconsensus.graph import LaplacianSet, NoiseTopology, PinningConfig, WeightedDigraph, example1_graph


def one_agent(kappa=1.0):
    return LaplacianSet.build(WeightedDigraph(np.zeros((1, 1))), PinningConfig(np.array([kappa])))


def random_set(rng, N, pin=True):
    a = rng.uniform(0, 2, (N, N)) * (rng.uniform(size=(N, N)) < 0.6)
    np.fill_diagonal(a, 0)
    kap = rng.uniform(0, 3, N) * pin
    return LaplacianSet.build(WeightedDigraph(a), PinningConfig(kap), NoiseTopology(a * rng.uniform(0, 1)))


def test_one_agent_blocks():
    s = build_system(one_agent(), CouplingGains(1, 1), NoiseIntensities())
    np.testing.assert_array_equal(s.H1, [[0, 1], [-1, -1]])
    np.testing.assert_array_equal(s.H2, [[0, 1], [0, 0]])
    assert np.all(s.U == 0)


def test_example1_lower_left():
    ls = LaplacianSet.build(example1_graph(), PinningConfig(np.r_[6, 6, np.zeros(7)]))
    s = build_system(ls, CouplingGains(0.2, 0.2), NoiseIntensities(0.2, 0.2))
    assert s.H1.shape == (18, 18)
    np.testing.assert_allclose(s.H1[9:, :9], -0.2 * ls.Ltilde)
    np.testing.assert_allclose(s.U[9:, :9], 0.2 * ls.L)


def test_no_pinning_h1_equals_h2():
    ls = random_set(np.random.default_rng(0), 4, pin=False)
    s = build_system(ls, CouplingGains(0.7, 1.3), NoiseIntensities(0.1, 0.2))
    np.testing.assert_array_equal(s.H1, s.H2)


def test_stacked_nonlinearity():
    f = builtin_pendulum()
    F = stacked_nonlinearity(f, np.zeros((1, 1)), np.zeros((1, 1)), [np.pi / 2], [0.0])
    np.testing.assert_allclose(F, [[0.0], [1.0]])
    x = np.ones((3, 2))
    assert np.all(stacked_nonlinearity(builtin_zero(2), x, x, [5, 5], [1, 1]) == 0)
    x0 = np.array([0.3]); v0 = np.array([-0.2])
    same = stacked_nonlinearity(f, np.tile(x0, (4, 1)), np.tile(v0, (4, 1)), x0, v0)
    assert np.all(same == 0)


def test_drift_cases():
    s = build_system(one_agent(), CouplingGains(1, 1), NoiseIntensities())
    assert np.all(drift(s, np.zeros((2, 1)), np.zeros((2, 1)), True) == 0)
    np.testing.assert_array_equal(drift(s, np.zeros(2), np.array([1.0, 0]), True).ravel(), [0, -1])
    s0 = build_system(one_agent(0.0), CouplingGains(1, 1), NoiseIntensities())
    xi = np.array([[0.4], [-1.1]])
    np.testing.assert_array_equal(drift(s, np.zeros((2, 1)), xi, False), drift(s0, np.zeros((2, 1)), xi, False))


def test_diffusion_cases():
    a = np.array([[0, 1.0], [0, 0]])
    ls = LaplacianSet.build(WeightedDigraph(a), PinningConfig(np.zeros(2)))
    s = build_system(ls, CouplingGains(1, 1), NoiseIntensities(1.0, 0.0))
    xi = np.array([1.0, 0, 0, 0])[:, None]             # (x1, x2, v1, v2)
    np.testing.assert_array_equal(diffusion(s, xi, True).ravel(), [0, 0, -1, 0])
    assert np.all(diffusion(s, np.ones((4, 1)), False) == 0)
    s0 = build_system(ls, CouplingGains(1, 1), NoiseIntensities())
    assert np.all(diffusion(s0, np.arange(4.0), True) == 0)


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 10**6))
def test_kron_identity(N, n, seed):
    rng = np.random.default_rng(seed)
    s = build_system(random_set(rng, N), CouplingGains(*rng.uniform(0, 2, 2)),
                     NoiseIntensities(*rng.normal(size=2)))
    xi = rng.normal(size=(2 * N, n))
    # kron acts on the (all x then all v) stacking with n components each
    for H in (s.H1, s.H2, s.U):
        ref = kron_apply(H, xi.reshape(-1), n).reshape(2 * N, n)
        np.testing.assert_allclose(H @ xi, ref, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10**6))
def test_consensus_manifold(N, n, seed):
    rng = np.random.default_rng(seed)
    ls = random_set(rng, N, pin=False)
    s = build_system(ls, CouplingGains(*rng.uniform(0, 2, 2)), NoiseIntensities(*rng.normal(size=2)))
    xi = np.vstack([np.tile(rng.normal(size=n), (N, 1)), np.tile(rng.normal(size=n), (N, 1))])
    np.testing.assert_allclose((s.H2 @ xi)[N:], 0, atol=1e-12)
    np.testing.assert_allclose(diffusion(s, xi, True), 0, atol=1e-12)


def test_interleaving_roundtrip():
    xi = np.arange(12.0).reshape(6, 2)
    flat = to_interleaved(xi)
    np.testing.assert_array_equal(flat[:4], [0, 1, 6, 7])     # x1, v1
    np.testing.assert_array_equal(from_interleaved(flat, 3), xi)
