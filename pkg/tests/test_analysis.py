import numpy as np
import pytest

from lagconsensus.analysis import (
    build_bounds, build_deltas, build_P, build_Q, build_R1_R2_S, certify, check_sandwich,
    identity_residuals, lyapunov_value, R2_doubled_pinning, Q_block_form, search_feasible_gain,
)
from lagconsensus.dynamics import builtin_zero
from lagconsensus.errorsys import CouplingGains, NoiseIntensities, build_system
from lagconsensus.graph import LaplacianSet, PinningConfig, WeightedDigraph, example1_graph, small_world_digraph, symmetric_part
from lagconsensus.simulate import Problem, ScheduleSpec, SimConfig, monte_carlo

from _systems import certified_candidate, random_system


def one_agent(kappa=1.0):
    return LaplacianSet.build(WeightedDigraph(np.zeros((1, 1))), PinningConfig(np.array([kappa])))


def example1():
    return LaplacianSet.build(example1_graph(), PinningConfig(np.r_[6, 6, np.zeros(7)]))


G1 = CouplingGains(1, 1)


def test_P_one_agent():
    P = build_P(one_agent(), G1)
    np.testing.assert_array_equal(P, [[2, 1], [1, 1]])
    np.testing.assert_allclose(np.linalg.eigvalsh(P), [(3 - 5 ** 0.5) / 2, (3 + 5 ** 0.5) / 2])
    P1, P2 = build_bounds(one_agent(), G1)
    np.testing.assert_array_equal(P1, P)
    np.testing.assert_array_equal(P2, P)


def test_P_degenerate_c1():
    ls = example1()
    P = build_P(ls, CouplingGains(0, 0.5))
    np.testing.assert_array_equal(P[:9], 0)
    np.testing.assert_array_equal(P[9:, 9:], 0.5 * np.eye(9))
    assert np.linalg.eigvalsh(P)[0] <= 0


def test_deltas():
    assert build_deltas(CouplingGains(0.2, 0.2), 0, 14.28) == pytest.approx((1.428, 4.284, 1.428))
    assert build_deltas(CouplingGains(1, 1), 1, 0.15) == pytest.approx((1.575, 0.725, 0.575))
    assert build_deltas(CouplingGains(2, 3), 0, 0) == (0, 0, 0)


def test_R1_S_one_agent():
    R1, R2, S = build_R1_R2_S(one_agent(), G1, build_deltas(G1, 0, 0), 0, 0)
    np.testing.assert_allclose(R1, np.diag([1.0, 0.0]))
    assert np.all(S == 0)


def test_Q_one_agent_and_degenerate():
    np.testing.assert_allclose(build_Q(one_agent(), G1), np.diag([1.0, 0.0]))
    ls = example1()
    Q = build_Q(ls, CouplingGains(0, 0.7))
    np.testing.assert_allclose(Q[:9, :9], 0, atol=1e-14)
    np.testing.assert_allclose(Q[9:, 9:], 0.49 * ls.Ltilde_s, atol=1e-14)


def test_identities_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ls, g, ni, r1, r2 = random_system(rng)
        res = identity_residuals(ls, g, r1, r2)
        assert res["Q"] <= 1e-10 and res["R2"] <= 1e-10
        P = build_P(ls, g)
        H = build_system(ls, g, ni)
        np.testing.assert_allclose(build_Q(ls, g), -symmetric_part(P @ H.H1), atol=1e-10)
        np.testing.assert_allclose(Q_block_form(ls, g), -symmetric_part(P @ H.H1), atol=1e-10)


def test_R2_doubled_pinning_gap():
    # an off-diagonal 2 c1 c2 K^s exceeds the identity-consistent one by c1 c2 K^s
    ls = example1()
    g = CouplingGains(0.2, 0.3)
    d = build_deltas(g, 0.5, 2.0)
    R2 = build_R1_R2_S(ls, g, d, 0.5, 2.0)[1]
    gap = R2_doubled_pinning(ls, g, d, 0.5, 2.0) - R2
    np.testing.assert_allclose(gap[:9, 9:], 0.06 * ls.Ks, atol=1e-14)
    np.testing.assert_allclose(gap[:9, :9], 0, atol=1e-14)
    assert identity_residuals(ls, g, 0.5, 2.0)["R2_doubled"] == pytest.approx(0.06 * 6)


def test_bounds_sandwich_spectra():
    rng = np.random.default_rng(1)
    for _ in range(100):
        ls, g, *_ = random_system(rng)
        P = build_P(ls, g)
        P1, P2 = build_bounds(ls, g)
        lp = np.linalg.eigvalsh(P)
        assert np.linalg.eigvalsh(P1)[0] <= lp[0] + 1e-10
        assert lp[-1] <= np.linalg.eigvalsh(P2)[-1] + 1e-10


def test_sandwich_checks():
    P = build_P(one_agent(), G1)
    assert check_sandwich(P, P, P, 2000, rng=0)
    ls = example1()
    g = CouplingGains(0.2, 0.2)
    P1, P2 = build_bounds(ls, g)
    P = build_P(ls, g)
    assert check_sandwich(P, P1, P2, 10_000, rng=1, n=3)
    assert not check_sandwich(P, P2, P1, 10_000, rng=1, n=3)


def test_lyapunov_value_matches_kron():
    rng = np.random.default_rng(2)
    P = build_P(example1(), CouplingGains(0.2, 0.2))
    xi = rng.normal(size=(18, 3))
    from lagconsensus.errorsys import to_interleaved
    flat = xi.reshape(-1)           # (all x then all v) stacking with components inner
    ref = 0.5 * flat @ np.kron(P, np.eye(3)) @ flat
    assert lyapunov_value(P, xi) == pytest.approx(ref, rel=1e-12)
    assert to_interleaved(xi).size == flat.size


def test_example1_certificate_fixture():
    c = certify(example1(), CouplingGains(0.2, 0.2), NoiseIntensities(0.2, 0.2), 0, 14.28, 0.3, 1.0)
    assert c.verdict == "inapplicable"
    assert c.gamma == pytest.approx(-9.782202285879919, rel=1e-10)
    assert c.lam_min_P1 == pytest.approx(-0.0826651639196119, rel=1e-10)
    assert c.lam_min_P == pytest.approx(-0.08266516391961219, rel=1e-10)
    assert c.lam_max_P2 == pytest.approx(0.7077777110907106, rel=1e-10)
    assert c.lam_min_R1 == pytest.approx(-4.454577488821808, rel=1e-10)
    assert c.lam_max_R2 == pytest.approx(3.8200601548076594, rel=1e-10)
    assert c.lam_max_UPU == pytest.approx(0.8730473082363026, rel=1e-10)
    assert c.margin_ii == pytest.approx(60.5494404300026, rel=1e-10)
    assert not c.cond_i and c.cond_ii
    assert any("P1" in d for d in c.diagnostics)


def test_zero_noise_gamma():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ls, g, _, r1, r2 = random_system(rng)
        c = certify(ls, g, NoiseIntensities(), r1, r2, 0.3, 1.0)
        assert c.gamma == 2 * c.lam_min_R1


def test_noise_scaling_quadratic():
    rng = np.random.default_rng(4)
    for _ in range(20):
        ls, g, _, r1, r2 = random_system(rng)
        b = rng.uniform(0.1, 1)
        a = certify(ls, g, NoiseIntensities(b, b), r1, r2, 0.3, 1.0).lam_max_UPU
        c = certify(ls, g, NoiseIntensities(2 * b, 2 * b), r1, r2, 0.3, 1.0).lam_max_UPU
        assert c == pytest.approx(4 * a, rel=1e-10, abs=1e-14)


def test_no_failures_margin():
    rng = np.random.default_rng(5)
    ls, g, ni, r1, r2 = random_system(rng)
    c = certify(ls, g, ni, r1, r2, 0.8, 0.8)
    assert c.margin_ii == pytest.approx(c.mu1_bar * 0.8)
    assert c.cond_ii == (c.gamma > 0)


def test_certificate_invariants_and_purity():
    rng = np.random.default_rng(6)
    for _ in range(20):
        ls, g, ni, r1, r2 = random_system(rng)
        c = certify(ls, g, ni, r1, r2, 0.3, 1.0)
        for m in (c.P, c.P1, c.P2, c.Q, c.R1, c.R2, c.S):
            np.testing.assert_allclose(m, m.T, atol=1e-12)
        assert c.mu_breve == min(c.mu1_bar, c.mu2_bar)
        assert c.cond_i == (c.gamma >= 0) and c.cond_ii == (c.margin_ii > 0)
        again = certify(ls, g, ni, r1, r2, 0.3, 1.0)
        assert again.csv_row() == c.csv_row()
    with pytest.raises(ValueError):
        certify(ls, g, ni, r1, r2, 1.0, 0.5)


def test_report_and_csv():
    c = certify(one_agent(3.0), CouplingGains(0.5, 2), NoiseIntensities(), 0, 0, 1.0, 1.0)
    assert c.verdict == "certified"
    assert "verdict = certified" in c.report()
    head, row = c.csv_row().splitlines()
    assert len(head.split(",")) == len(row.split(","))


def test_gain_search_trivial_start():
    g = WeightedDigraph(np.zeros((1, 1)))
    gs = search_feasible_gain(g, [0], CouplingGains(0.5, 2), NoiseIntensities(), 0, 0, [3.0, 4.0], 1.0, 1.0)
    assert gs.kappa == 3.0
    with pytest.raises(ValueError):
        search_feasible_gain(g, [0], G1, NoiseIntensities(), 0, 0, [2.0, 1.0], 0.9, 1.0)


def test_gain_search_example2_curve():
    g = small_world_digraph(50, 4, 0.1, seed=2024)
    gs = search_feasible_gain(g, [0], CouplingGains(1, 1), NoiseIntensities(0.9, 0.9), 1, 0.15,
                              np.linspace(0, 10, 11), 0.3, 1.0)
    assert gs.kappa is None
    assert set(gs.verdicts) == {"inapplicable"}
    np.testing.assert_allclose(gs.gamma[[0, 5, 10]], [-86.24106769, -86.20795649, -86.20530043], atol=1e-7)
    np.testing.assert_allclose(gs.margin[[0, 5, 10]], [1.9485547, 7.3588406, 18.29831245], atol=1e-6)


@pytest.mark.slow
def test_empirical_soundness():
    """Falsification harness: certified systems must decay in simulation."""
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 20:
        g, ls, gains, noise, theta, delta = certified_candidate(rng)
        c = certify(ls, gains, noise, 0, 0, theta, delta)
        if not (c.certified and c.lam_min_P1 > 0):
            continue
        prob = Problem(g, PinningConfig(np.diag(ls.K).copy()), gains, noise, builtin_zero(1))
        # time after which the sandwich bound plus decay rate mu_breve implies a 10x drop
        horizon = float(np.clip(np.log(10 * c.lam_max_P2 / c.lam_min_P1) / c.mu_breve, 5, 60))
        cfg = SimConfig(dt=2e-3, horizon=horizon, tau=0.5, trials=20, seed=checked)
        mc = monte_carlo(prob, ScheduleSpec("random", theta, delta), cfg)
        assert mc.divergent == 0
        assert mc.msq_xi[-1] < 0.1 * mc.msq_xi[0], (checked, mc.decay_ratio)
        checked += 1
