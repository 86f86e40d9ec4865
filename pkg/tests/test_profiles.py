from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from ruperlb import ConfigError
from ruperlb.simulator import JitteredProfile, SpeedProfile, integrate_iterations, profile_speed


def test_constant_speed():
    p = SpeedProfile.constant(100)
    assert profile_speed(p, 0.0) == 100
    assert profile_speed(p, 1e6) == 100


def test_step_schedule():
    p = SpeedProfile.step_schedule(100, [(50, 0.5)])
    assert profile_speed(p, 49) == 100
    assert profile_speed(p, 51) == 50


def test_table_interpolates_and_clamps():
    p = SpeedProfile.tabulated(100, [(0, 1.0), (100, 0.5)])
    assert profile_speed(p, 50) == pytest.approx(75)
    assert profile_speed(p, 500) == pytest.approx(50)
    q = SpeedProfile.tabulated(100, [(10, 0.5), (20, 1.0)])
    assert profile_speed(q, 0) == pytest.approx(50)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        profile_speed(SpeedProfile.constant(1), -1.0)


def test_integrate_constant():
    assert integrate_iterations(SpeedProfile.constant(100), 0, 10) == 1000


def test_integrate_step():
    assert integrate_iterations(SpeedProfile.step_schedule(100, [(5, 0.5)]), 0, 10) == 750


def test_integrate_sine_full_period():
    p = SpeedProfile.sinusoidal(80, 0.5, 40)
    assert integrate_iterations(p, 0, 40) == 80 * 40
    assert p.cumulative(40) == pytest.approx(3200)


def test_integrate_reversed_interval():
    with pytest.raises(ValueError):
        integrate_iterations(SpeedProfile.constant(1), 5, 1)


def test_invalid_profiles():
    with pytest.raises(ConfigError):
        SpeedProfile("wobbly", 1.0)
    with pytest.raises(ConfigError):
        SpeedProfile.constant(-1)
    with pytest.raises(ConfigError):
        SpeedProfile.tabulated(1, [(5, 1), (5, 2)])
    with pytest.raises(ConfigError):
        SpeedProfile.sinusoidal(1, 1.5, 10)


tables = st.lists(
    st.tuples(st.floats(0.5, 100.0), st.floats(0.0, 2.0)), min_size=1, max_size=6
).map(lambda pts: [(sum(dt for dt, _ in pts[: k + 1]), m) for k, (_, m) in enumerate(pts)])


def _profiles():
    return st.one_of(
        st.floats(1.0, 1e4).map(SpeedProfile.constant),
        st.tuples(st.floats(1.0, 1e3), tables).map(lambda a: SpeedProfile.step_schedule(*a)),
        st.tuples(st.floats(1.0, 1e3), tables).map(lambda a: SpeedProfile.tabulated(*a)),
        st.tuples(st.floats(1.0, 1e3), st.floats(0.0, 1.0), st.floats(1.0, 500.0), st.floats(0, 6.3)).map(
            lambda a: SpeedProfile.sinusoidal(*a)
        ),
    )


@settings(max_examples=150)
@given(p=_profiles(), t0=st.floats(0.0, 300.0), dt=st.floats(0.0, 300.0))
def test_cumulative_matches_numerical_quadrature(p, t0, dt):
    t1 = t0 + dt
    points = [t for t, _ in (p.steps or p.table) if t0 < t < t1] or None
    exact, _ = quad(p.speed, t0, t1, points=points, limit=200)
    got = p.cumulative(t1) - p.cumulative(t0)
    assert got == pytest.approx(exact, rel=1e-6, abs=1e-6 * p.base_speed)
    assert p.speed(t0) >= 0


@settings(max_examples=150)
@given(p=_profiles(), t0=st.floats(0.0, 300.0), amount=st.floats(0.0, 1e5))
def test_time_to_reach_inverts_cumulative(p, t0, amount):
    t = p.time_to_reach(t0, amount)
    if math.isinf(t):
        return
    assert t >= t0
    assert p.cumulative(t) - p.cumulative(t0) == pytest.approx(amount, rel=1e-7, abs=1e-6)


def test_jitter_is_seeded_and_consistent():
    base = SpeedProfile.constant(100)
    a = JitteredProfile(base, 0.2, 10.0, seed=1, rank=0, thread=0)
    b = JitteredProfile(base, 0.2, 10.0, seed=1, rank=0, thread=0)
    c = JitteredProfile(base, 0.2, 10.0, seed=1, rank=0, thread=1)
    assert [a.speed(t) for t in range(0, 100, 7)] == [b.speed(t) for t in range(0, 100, 7)]
    assert a.speed(5) != c.speed(5)
    exact, _ = quad(a.speed, 0, 95, points=list(range(10, 95, 10)), limit=200)
    assert a.cumulative(95) == pytest.approx(exact)
    t = a.time_to_reach(3.0, 2500.0)
    assert a.cumulative(t) - a.cumulative(3.0) == pytest.approx(2500.0)
