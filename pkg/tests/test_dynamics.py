import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracergo.dynamics import (
    BlowUpError,
    DriftError,
    as_sigma,
    burn_in_stationary,
    integrate,
    make_double_well_drift,
    make_drift,
    make_flatbottom_drift,
    make_linear_drift,
    ou_comparison_probe,
    verify_c1,
    write_trajectory_csv,
)
from fracergo.kernels import make_kernel
from fracergo.noise import NoisePath, required_past, sample_wiener, synthesize_noise


def _zero_noise(T, step, n=1, d=1):
    w = sample_wiener(0.0, T, step, seed=0, replicas=n, d=d)
    grid = w.future_grid
    return NoisePath(grid, np.zeros((n, grid.size, d)), w, (0.0, 0.0))


def test_flat_region():
    b = make_flatbottom_drift(R=1.0, kappa=1.0, d=2)
    assert np.all(b(np.array([[0.3, -0.4], [0.0, 0.0]])) == 0.0)


def test_flat_bottom_formula():
    b = make_flatbottom_drift(R=1.0, kappa=1.0, d=2)
    assert np.allclose(b(np.array([2.0, 0.0])), [-1.0, 0.0])


def test_zero_radius_is_linear():
    b = make_flatbottom_drift(R=0.0, kappa=2.0, d=3)
    x = np.array([1.0, -2.0, 0.5])
    assert np.allclose(b(x), -2.0 * x)
    assert b.family == "linear"


def test_bad_parameters():
    with pytest.raises(DriftError):
        make_flatbottom_drift(R=-1.0)
    with pytest.raises(DriftError):
        make_drift({"family": "doublewell"}, d=2)
    with pytest.raises(DriftError):
        make_drift({"family": "cubic"})


@settings(max_examples=50, deadline=None)
@given(x=st.lists(st.floats(-10, 10), min_size=2, max_size=2),
       y=st.lists(st.floats(-10, 10), min_size=2, max_size=2),
       R=st.floats(0.0, 3.0), kappa=st.floats(0.1, 5.0))
def test_flat_bottom_is_monotone(x, y, R, kappa):
    b = make_flatbottom_drift(R, kappa, d=2)
    x, y = np.array(x), np.array(y)
    assert np.dot(x - y, b(x) - b(y)) <= 1e-9 * (1 + np.dot(x - y, x - y))


def test_c1_passes_flat_bottom():
    rep = verify_c1(make_flatbottom_drift(1.0, 1.0))
    assert rep.passed and rep.witness is None
    assert rep.rbar > 1.0 and rep.kbar >= 0.25


def test_c1_linear_constants():
    rep = verify_c1(make_linear_drift(1.0, d=2))
    assert rep.passed
    assert rep.rbar == 0.0 and rep.kbar == pytest.approx(1.0)


def test_c1_rejects_double_well_with_witness():
    b = make_double_well_drift()
    rep = verify_c1(b)
    assert not rep.passed
    x, y, inner = rep.witness
    assert inner > 0
    assert float(np.dot(x - y, b(x) - b(y))) == pytest.approx(inner)
    # the pair quoted in the docs
    x, y = np.array([0.5]), np.array([-0.5])
    assert float(np.dot(x - y, b(x) - b(y))) == pytest.approx(0.75)


def test_zero_drift_reproduces_noise():
    k = make_kernel("fractional", H=0.3)
    w = sample_wiener(required_past(k, 1.0), 1.0, 1e-2, seed=0, replicas=3, d=2)
    g = synthesize_noise(k, w)
    zero = make_flatbottom_drift(R=1e9, kappa=1.0, d=2)
    x0 = np.array([0.5, -1.0])
    tr = integrate(zero, 1.0, x0, g)
    assert np.allclose(tr.values, x0 + g.values)


def test_linear_ode_solution():
    tr = integrate(make_linear_drift(), 1.0, [1.0], _zero_noise(1.0, 1e-3))
    assert tr.values[0, -1, 0] == pytest.approx(math.exp(-1), abs=2e-3 * math.exp(-1))


def test_integrator_first_order():
    errs = []
    steps = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    for h in steps:
        tr = integrate(make_linear_drift(), 1.0, [1.0], _zero_noise(1.0, h))
        errs.append(abs(tr.values[0, -1, 0] - math.exp(-1)))
    slope = np.polyfit(np.log(steps), np.log(errs), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.2)


def test_extra_drift_callable_recorded():
    noise = _zero_noise(1.0, 1e-2)
    tr = integrate(make_linear_drift(), 1.0, [0.0], noise, extra_drift=lambda n, t, x: np.ones_like(x))
    assert tr.extra.shape == (1, 100, 1)
    # dx = (1 - x) dt from 0
    assert tr.values[0, -1, 0] == pytest.approx(1 - math.exp(-1), abs=3e-3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_is_reported():
    def b(x):
        return np.asarray(x, dtype=float) ** 3

    from fracergo.dynamics import DriftSpec

    drift = DriftSpec(b, 1, 1.0, 0.0)
    with pytest.raises(BlowUpError) as exc:
        integrate(drift, 1.0, [10.0], _zero_noise(5.0, 0.1))
    assert exc.value.time > 0


def test_sigma_must_be_invertible():
    with pytest.raises(ValueError):
        as_sigma(np.zeros((2, 2)), 2)
    assert np.allclose(as_sigma(2.0, 3), [2.0, 2.0, 2.0])


def test_trajectory_csv(tmp_path):
    tr = integrate(make_linear_drift(), 1.0, [1.0], _zero_noise(0.1, 0.05))
    p = tmp_path / "x.csv"
    write_trajectory_csv(p, tr)
    assert p.read_text().splitlines()[0] == "t,x_1"


def test_ou_probe_no_violations():
    k = make_kernel("fractional", H=0.5)
    rep = ou_comparison_probe(make_flatbottom_drift(), k, np.array([2.0]), T=10.0, n=200)
    assert rep.violations == 0
    assert np.isfinite(rep.c_fit)
    late = rep.ou_second_moment[rep.ou_second_moment.size // 2 :]
    assert np.isfinite(late).all() and late.max() < 2 * late.mean()


def test_ou_probe_identical_drift():
    k = make_kernel("fractional", H=0.5)
    rep = ou_comparison_probe(make_linear_drift(), k, np.array([1.0]), T=2.0, n=20)
    assert rep.c_fit == 0.0


def test_stationary_ou_variance():
    h = 1e-2
    b = burn_in_stationary(make_linear_drift(), 1.0, make_kernel("fractional", H=0.5), T_burn=20.0, n=4000,
                           step=h, seed=5)
    # explicit scheme: the stationary variance is 1 / (2 - h)
    se = math.sqrt(2 / 4000) * 0.5
    assert b.moments["m2_2T"] == pytest.approx(1 / (2 - h), abs=4 * se)
    assert b.stable


def test_flat_bottom_moments_finite_and_stable():
    k = make_kernel("fractional", H=0.3)
    b = burn_in_stationary(make_flatbottom_drift(), 1.0, k, T_burn=20.0, n=1000, orders=(2, 4, 8))
    assert all(np.isfinite(v) for v in b.moments.values())
    assert b.moments["m2_2T"] == pytest.approx(b.moments["m2_T"], rel=0.15)
    assert b.wiener.horizon == pytest.approx(20.0)
