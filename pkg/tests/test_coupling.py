import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracergo.coupling import (
    ScheduleError,
    build_stopping_schedule,
    check_memory_condition,
    contraction_probe,
    default_epsilon,
    stepwise_decay_probe,
    synchronous_couple,
    tail_bound_check,
    waiting_time,
)
from fracergo.dynamics import make_flatbottom_drift, make_linear_drift
from fracergo.kernels import make_kernel
from fracergo.noise import decompose_noise, required_past, sample_wiener

H03 = make_kernel("fractional", H=0.3)


def _schedule_wiener(kernel, n, seed=5, k_max=6, step=1e-2):
    T0 = 2.0 * (k_max + 2)
    return sample_wiener(required_past(kernel, 6 * T0), T0, step, seed, n)


def test_waiting_time_examples():
    assert waiting_time(1.0, 0.0, 0.5) == 1.0
    assert waiting_time(1.0, 2.0, 0.5) == pytest.approx(4.0)
    assert waiting_time(1.0, 1.05, 0.5, step=0.01) == pytest.approx(1.11)


def test_default_epsilon():
    assert default_epsilon(H03) == 0.05
    assert default_epsilon(make_kernel("fractional", H=0.95)) == pytest.approx(0.0125)


def test_equal_start_gap_zero():
    ct = synchronous_couple(make_flatbottom_drift(), 1.0, [1.0], [1.0], H03, 2.0, n=3, step=1e-2)
    assert np.all(ct.gap == 0.0)


def test_linear_gap_closed_form():
    h = 1e-3
    ct = synchronous_couple(make_linear_drift(), 1.0, [2.0], [-1.0], H03, 1.0, n=2, step=h)
    # the gap solves d(gap) = -gap dt whatever the noise
    assert np.allclose(ct.gap[:, -1], 3.0 * (1 - h) ** 1000, rtol=1e-9)
    assert ct.gap[0, -1] == pytest.approx(3.0 * math.exp(-1), rel=2e-3)


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_gap_non_increasing(H):
    k = make_kernel("fractional", H=H)
    ct = synchronous_couple(make_flatbottom_drift(d=2), 1.0, [3.0, 0.0], [-3.0, 1.0], k, 5.0, n=50, step=1e-2)
    assert np.max(np.diff(ct.gap, axis=1)) <= 1e-12


def test_stationary_second_leg():
    ct = synchronous_couple(make_flatbottom_drift(), 1.0, "stationary", "stationary", H03, 2.0, n=4,
                            step=1e-2, T_burn=5.0)
    assert np.all(ct.gap == 0.0)
    assert ct.times[0] == 0.0 and ct.times[-1] == pytest.approx(2.0)


def test_bad_second_leg():
    with pytest.raises(ValueError):
        synchronous_couple(make_flatbottom_drift(), 1.0, [0.0], "uniform", H03, 1.0)


def test_schedule_shape_and_recursion():
    s = build_stopping_schedule(H03, _schedule_wiener(H03, 20), memory=False)
    assert s.taus.shape == (20, 7)
    assert np.all(s.taus[:, 0] == 0.0)
    assert np.allclose(s.taus[:, 1:], 1.0 + s.taus[:, :-1] + s.deltas[:, 1:])
    assert np.all(s.deltas[:, 1:] >= 1.0)


def test_schedule_deterministic():
    a = build_stopping_schedule(H03, _schedule_wiener(H03, 10), memory=False)
    b = build_stopping_schedule(H03, _schedule_wiener(H03, 10), memory=False)
    assert np.array_equal(a.taus, b.taus)


def test_schedule_rejects_epsilon():
    with pytest.raises(ScheduleError):
        build_stopping_schedule(H03, _schedule_wiener(H03, 2), epsilon=H03.alpha + 0.5)


def test_schedule_extends_record():
    w = sample_wiener(required_past(H03, 40.0), 1.0, 1e-2, seed=1, replicas=4)
    s = build_stopping_schedule(H03, w, memory=False, k_max=3)
    assert s.wiener.horizon >= s.taus.max() + 1.0
    long = sample_wiener(required_past(H03, 40.0), s.wiener.horizon, 1e-2, seed=1, replicas=4)
    assert np.array_equal(long.increments, s.wiener.increments)


@pytest.mark.parametrize("p", [1, 2, 4])
def test_tail_bound(p):
    s = build_stopping_schedule(H03, _schedule_wiener(H03, 200), memory=False)
    holds, worst, M = tail_bound_check(s, p)
    assert holds and worst <= 1.0 and M >= 2.0**p


def test_memory_condition_and_K():
    s = build_stopping_schedule(H03, _schedule_wiener(H03, 100))
    rep = check_memory_condition(s)
    assert rep.remote_fraction_ok >= 0.99
    assert rep.eta_hat > 0.25
    assert len(s.rows()) == 100 * 6


def test_remote_sup_decreases_with_waiting():
    w = sample_wiener(required_past(H03, 60.0), 20.0, 1e-2, seed=3, replicas=300)
    sups = []
    for delta in (1.0, 4.0, 16.0):
        dec = decompose_noise(H03, w, 2.0, 2.0 + delta)
        sups.append(np.abs(dec.remote).max(axis=(1, 2)).mean())
    assert sups[0] > sups[1] > sups[2]


def test_linear_contraction_rate():
    p = 2
    rep = contraction_probe(make_linear_drift(), 1.0, H03, p=p, n=50, n_remote=1)
    h = 1e-2
    assert rep.rho_hat == pytest.approx((1 - h) ** (p * 100), rel=1e-9)
    assert rep.rho_hat == pytest.approx(math.exp(-p), rel=0.03)


def test_flat_bottom_contraction():
    rep = contraction_probe(make_flatbottom_drift(), 1.0, make_kernel("fractional", H=0.5), K=3.0, n=300)
    assert rep.rho_hat < 1.0
    assert 0 < rep.eta_hat <= 1 and rep.rho_structural < 1.0
    assert rep.to_dict()["passed"]


def test_stepwise_equal_start():
    rep = stepwise_decay_probe(make_flatbottom_drift(), 1.0, H03, n=20, x0=1.0, y0=1.0, k_max=3)
    assert np.all(rep.moments == 0.0)


def test_stepwise_linear_superlinear_decay():
    rep = stepwise_decay_probe(make_linear_drift(), 1.0, H03, n=50, x0=1.0, y0=-1.0, k_max=4)
    assert np.all(np.diff(np.log(rep.moments)) < -3.0)


@settings(max_examples=10, deadline=None)
@given(x=st.floats(-5, 5), y=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_gap_monotone_property(x, y, seed):
    ct = synchronous_couple(make_flatbottom_drift(), 1.0, [x], [y], H03, 2.0, seed=seed, n=4, step=1e-2)
    assert np.max(np.diff(ct.gap, axis=1)) <= 1e-12
