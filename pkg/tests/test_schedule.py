import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagconsensus.schedule import (
    ScheduleError, active_mask, always_active, from_cycles, generate_random, is_active,
    load_csv, save_csv, stats,
)


def test_bounds_example():
    s = generate_random(0.3, 1.0, 15.0, np.random.default_rng(9))
    full = slice(None, -1) if s.truncated else slice(None)
    assert np.all(s.switch_off[full] - s.starts[full] >= 0.3)
    assert np.all(s.ends - s.starts <= 1.0 + 1e-12)
    assert stats(s).psi_bound <= 1 - 0.3 / 1.0 + 1e-12


def test_psi_bound_example():
    s = from_cycles([(0, 0.3, 1.0)], theta=0.3, delta=1.0)
    assert stats(s).psi_bound == pytest.approx(0.7)


def test_golden_endpoints():
    s = generate_random(0.3, 1.0, 15.0, np.random.default_rng(42))
    assert len(s.starts) == 23 and s.truncated
    np.testing.assert_allclose(s.starts[:4], [0.0, 0.84176923, 1.74278778, 2.10871192], atol=1e-8)
    np.testing.assert_allclose(s.switch_off[:4], [0.53777084, 1.56090035, 2.10710485, 2.82752525],
                               atol=1e-8)
    assert s.ends[-1] == 15.0


def test_nearly_always_active():
    s = generate_random(1.0 - 1e-9, 1.0, 10.0, 0)
    assert s.active_duration() > 10.0 - 1e-6


def test_generate_rejects():
    with pytest.raises(ScheduleError):
        generate_random(1.0, 1.0, 5.0, 0)
    with pytest.raises(ScheduleError):
        generate_random(0.5, 0.2, 5.0, 0)


def test_always_active():
    s = always_active(10.0)
    assert all(is_active(s, t) for t in np.linspace(0, 10, 101))
    st_ = stats(s)
    assert st_.psi_emp == 0 and st_.theta_emp == st_.delta_emp == 10.0


def test_closed_interval_boundaries():
    s = from_cycles([(0, 0.5, 1.0), (1.0, 1.4, 2.0)])
    assert is_active(s, 0.5) and is_active(s, 1.0) and is_active(s, 1.4)
    assert not is_active(s, 0.75) and not is_active(s, 1.7)
    with pytest.raises(ScheduleError):
        is_active(s, 2.5)


def test_stats_two_cycles():
    s = from_cycles([(0, 0.5, 1.0), (1.0, 1.4, 2.0)])
    assert stats(s).psi_emp == pytest.approx(0.6)


def test_invalid_schedules():
    with pytest.raises(ScheduleError):
        from_cycles([(0, 0.5, 1.0), (1.1, 1.4, 2.0)])     # gap
    with pytest.raises(ScheduleError):
        from_cycles([(0, 1.2, 1.0)])                       # s_k > t_{k+1}
    with pytest.raises(ScheduleError):
        from_cycles([(0, 0.1, 1.0), (1.0, 1.5, 2.0)], theta=0.3, delta=1.0)


@settings(max_examples=25)
@given(st.floats(0.05, 1.0), st.floats(0.01, 2.0), st.integers(0, 2**31))
def test_generated_always_valid(theta, extra, seed):
    s = generate_random(theta, theta + extra, 20.0, seed)
    t, sk, e = s.starts, s.switch_off, s.ends
    assert t[0] == 0 and e[-1] == 20.0
    assert np.all(t < sk) and np.all(sk <= e)
    full = slice(None, -1) if s.truncated else slice(None)
    assert np.all(sk[full] - t[full] >= theta - 1e-12)
    assert np.all(e - t <= theta + extra + 1e-12)


def test_psi_bound_thousand_schedules():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        theta = rng.uniform(0.05, 1)
        s = generate_random(theta, theta + rng.uniform(0.01, 2), 10.0, rng)
        st_ = stats(s)
        assert st_.psi_emp <= 1 - st_.theta_emp / st_.delta_emp + 1e-12


def test_indicator_integral():
    s = generate_random(0.3, 1.0, 15.0, 11)
    dt = 1e-3
    mid = np.arange(0, 15, dt) + dt / 2
    assert np.sum(active_mask(s, mid)) * dt == pytest.approx(s.active_duration(), abs=len(s.starts) * dt)


def test_csv_roundtrip(tmp_path):
    s = generate_random(0.3, 1.0, 15.0, 3)
    save_csv(tmp_path / "s.csv", s)
    back = load_csv(tmp_path / "s.csv", 0.3, 1.0, truncated=s.truncated)
    np.testing.assert_array_equal(back.starts, s.starts)
    np.testing.assert_array_equal(back.switch_off, s.switch_off)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "k,t_k,s_k,t_k1"
