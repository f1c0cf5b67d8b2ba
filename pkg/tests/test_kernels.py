import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from fracergo.kernels import (
    ConjugateKernel,
    KernelError,
    custom_kernel,
    fractional_conjugate,
    fractional_variance_constant,
    increment_variance,
    laplace_conjugate_check,
    make_kernel,
    verify_c2,
)


def test_brownian_kernel_is_constant():
    k = make_kernel("fractional", H=0.5)
    assert float(k.eval_g(np.array(-3.0))) == pytest.approx(1.0)
    assert k.alpha == 0.0 and k.c1 == 0.0


def test_fractional_constants_three_quarters():
    k = make_kernel("fractional", H=0.75)
    assert k.alpha == pytest.approx(-0.25)
    assert k.c1 == pytest.approx(0.1875)
    assert k.c2 == pytest.approx(0.1875)


@pytest.mark.parametrize("H", [0.0, 1.0, -0.2, 1.5])
def test_hurst_domain(H):
    with pytest.raises(KernelError):
        make_kernel("fractional", H=H)


def test_mixed_needs_ordered_indices():
    with pytest.raises(KernelError):
        make_kernel("mixed", H=0.8, Hp=0.3)


def test_unknown_family():
    with pytest.raises(KernelError):
        make_kernel("gaussian", H=0.3)


@settings(max_examples=40, deadline=None)
@given(H=st.floats(0.05, 0.95), v=st.floats(1e-6, 1e6))
def test_second_derivative_matches_power_law(H, v):
    k = make_kernel("fractional", H=H)
    e = H - 0.5
    expect = e * (e - 1.0) * v ** (e - 2.0)
    got = float(k.eval_g2(np.array(-v)))
    assert got == pytest.approx(expect, rel=1e-10, abs=1e-300)


@pytest.mark.parametrize("H", [0.1, 0.25, 0.5, 0.75, 0.9])
def test_verify_c2_fractional(H):
    rep = verify_c2(make_kernel("fractional", H=H))
    assert rep.passed
    assert all(r <= 1 + 1e-9 for r in rep.ratios.values())


def test_verify_c2_mixed():
    k = make_kernel("mixed", H=0.3, Hp=0.8)
    assert k.alpha == pytest.approx(-0.3)
    assert k.zeta == pytest.approx(0.2)
    assert verify_c2(k).passed


def test_verify_c2_custom_exponential():
    # e^{-v} v^1.6 peaks at v = 1.6 with value ~0.429, so C1 = 0.5 suffices
    k = custom_kernel(np.exp, np.exp, np.exp, alpha=-0.4, zeta=0.0, c1=0.5, c2=4.0)
    assert verify_c2(k).passed


def test_verify_c2_rejects_wrong_constant():
    k = make_kernel("fractional", H=0.3)
    bad = custom_kernel(k.eval_g, k.eval_g1, k.eval_g2, k.alpha, k.zeta, 0.5 * k.c1, k.c2)
    rep = verify_c2(bad)
    assert not rep.passed
    assert rep.ratios["g2_tail"] == pytest.approx(2.0)


def test_verify_c2_reports_nan_instead_of_raising():
    def g2(u):
        u = np.asarray(u, dtype=float)
        return np.where(u > -1e-6, np.nan, 0.0)

    zero = lambda u: np.zeros_like(np.asarray(u, dtype=float))
    rep = verify_c2(custom_kernel(zero, zero, g2, 0.0, 0.0, 1.0, 1.0))
    assert not rep.passed
    assert rep.failed_points


def test_variance_constant_against_quadrature():
    for H in (0.3, 0.7):
        k = make_kernel("fractional", H=H)
        assert increment_variance(k, 1.0) == pytest.approx(fractional_variance_constant(H), rel=1e-6)


@pytest.mark.parametrize("kernel", [("fractional", {"H": 0.2}), ("fractional", {"H": 0.8}),
                                    ("mixed", {"H": 0.3, "Hp": 0.8})])
def test_increment_square_integrable(kernel):
    k = make_kernel(kernel[0], **kernel[1])
    for t in (0.5, 1.0, 2.0):
        v = increment_variance(k, t)
        assert np.isfinite(v) and v > 0


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-30.0, -1e-3), b=st.floats(1e-4, 5.0), H=st.floats(0.1, 0.9))
def test_cell_average_matches_quadrature(a, b, H):
    k = make_kernel("fractional", H=H)
    lo, hi = a - b, a
    ref, _ = integrate.quad(lambda u: float(k.eval_g(np.array(u))), lo, hi, limit=200)
    assert float(k.cell_average(lo, hi)) == pytest.approx(ref / b, rel=1e-7)


def test_laplace_conjugate_fractional():
    H = 0.3
    err, errors = laplace_conjugate_check(make_kernel("fractional", H=H),
                                          fractional_conjugate(H, normalization="laplace"))
    assert err < 1e-3
    assert errors.size == 25


def test_laplace_conjugate_constant_normalisation():
    H = 0.3
    c = 1.0 / (special.gamma(1.5 - H) * special.gamma(H + 0.5))
    h = fractional_conjugate(H, normalization="laplace")
    assert float(h.eval_h(np.array(-1.0))) == pytest.approx(c)


def test_laplace_identity_case():
    one = lambda t: 1.0
    err, _ = laplace_conjugate_check(one, one)
    assert err < 1e-9


def test_laplace_zero_conjugate():
    err, errors = laplace_conjugate_check(make_kernel("fractional", H=0.5), lambda t: 0.0)
    assert err == pytest.approx(1.0)
    assert np.allclose(errors, 1.0)


def test_conjugate_antiderivative_consistent():
    h = fractional_conjugate(0.3)
    assert isinstance(h, ConjugateKernel)
    ref, _ = integrate.quad(lambda s: float(h.eval_h(np.array(-s))), 0.0, 0.7)
    assert float(h.eval_hint(0.7)) == pytest.approx(ref, rel=1e-9)


def test_describe_and_dict():
    k = make_kernel("mixed", H=0.3, Hp=0.8)
    assert k.describe() == "mixed(H=0.3, Hp=0.8)"
    d = k.to_dict()
    assert d["family"] == "mixed" and math.isclose(d["alpha"], -0.3)
