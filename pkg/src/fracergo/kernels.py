"""
Moving-average kernels and their certificates.

A kernel ``g`` maps the negative half-line to the reals and vanishes on
``u > 0``.  The noise built from it is

    G_t = int_{-inf}^0 (g(u - t) - g(u)) dW_u + int_0^t g(u - t) dW_u .

Two library families are provided in closed form:

* ``fractional(H)``: ``g(u) = (-u)^(H - 1/2)``, the Mandelbrot-Van Ness
  kernel with unit normalising constant;
* ``mixed(H, Hp)``: the sum of two such powers with ``H < Hp``.

Custom kernels are accepted when the caller supplies ``g``, ``g'``, ``g''``
and candidate constants; :func:`verify_c2` certifies the constants on a grid
rather than inferring them.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

__all__ = [
    "KernelError",
    "QuadratureError",
    "KernelSpec",
    "ConjugateKernel",
    "C2Report",
    "make_kernel",
    "custom_kernel",
    "verify_c2",
    "default_c2_grid",
    "increment_variance",
    "fractional_variance_constant",
    "fractional_conjugate",
    "laplace_transform",
    "laplace_conjugate_check",
]


class KernelError(ValueError):
    """Invalid kernel parameters."""


class QuadratureError(RuntimeError):
    """A quadrature did not converge; carries the offending argument."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


def _neg(u):
    """Return (-u) clipped to the open negative half-line, plus the mask u < 0."""
    u = np.asarray(u, dtype=float)
    mask = u < 0
    v = np.where(mask, -u, 1.0)
    return v, mask


def _power_term(e):
    """Closed forms for (-u)^e and its first two derivatives and antiderivative."""

    def g(u):
        v, m = _neg(u)
        return np.where(m, v**e, 0.0)

    def g1(u):
        v, m = _neg(u)
        return np.where(m, -e * v ** (e - 1.0), 0.0)

    def g2(u):
        v, m = _neg(u)
        return np.where(m, e * (e - 1.0) * v ** (e - 2.0), 0.0)

    def gint(u):
        # F(u) = -int_u^0 (-v)^e dv, so F' = g and F = 0 on u >= 0
        v, m = _neg(u)
        return np.where(m, -(v ** (e + 1.0)) / (e + 1.0), 0.0)

    return g, g1, g2, gint


@dataclass(frozen=True)
class KernelSpec:
    """Immutable description of a scalar moving-average kernel.

    ``eval_gint`` is an antiderivative with ``eval_gint(0) = 0``; it is used
    to integrate the kernel exactly over grid cells.  When absent, cell
    averages fall back to adaptive quadrature.
    """

    eval_g: Callable
    eval_g1: Callable
    eval_g2: Callable
    alpha: float
    zeta: float
    c1: float
    c2: float
    family_tag: str
    params: dict = field(default_factory=dict)
    eval_gint: Optional[Callable] = None

    @property
    def hurst(self):
        """Hurst index of the short-time behaviour (``1/2 - zeta``)."""
        return 0.5 - self.zeta

    def describe(self):
        if self.family_tag == "fractional":
            return f"fractional(H={self.params['H']:g})"
        if self.family_tag == "mixed":
            return f"mixed(H={self.params['H']:g}, Hp={self.params['Hp']:g})"
        return "custom"

    def to_dict(self):
        d = {"family": self.family_tag}
        d.update(self.params)
        d.update(alpha=self.alpha, zeta=self.zeta, c1=self.c1, c2=self.c2)
        return d

    def cell_average(self, a, b, shift=0.0):
        """Average of ``u -> g(u - shift)`` over the cells ``[a, b]``.

        Arrays broadcast.  Exact for library kernels (antiderivative
        differences), so the integrable singularity at ``u = shift`` is
        handled by product integration rather than a midpoint rule.
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        shift = np.asarray(shift, dtype=float)
        width = b - a
        if self.eval_gint is not None:
            return (self.eval_gint(b - shift) - self.eval_gint(a - shift)) / width
        return _quad_cell_average(self, a - shift, b - shift)


def _quad_cell_average(kernel, lo, hi):
    lo, hi = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float))
    out = np.empty(lo.shape)
    for idx in np.ndindex(lo.shape):
        l, h = float(lo[idx]), min(float(hi[idx]), 0.0)
        if h <= l:
            out[idx] = 0.0
            continue
        val, _ = integrate.quad(lambda s: float(kernel.eval_g(s)), l, h, limit=200)
        out[idx] = val / (float(hi[idx]) - float(lo[idx]))
    return out


def _check_hurst(name, value):
    if not (0.0 < value < 1.0):
        raise KernelError(f"{name} must lie in (0, 1), got {value!r}")


def make_kernel(family_tag, **params):
    """Build a library kernel.

    Parameters
    ----------
    family_tag : {"fractional", "mixed"}
    H : float
        Hurst index in (0, 1).
    Hp : float, mixed only
        Second index, ``H < Hp < 1``.

    Examples
    --------
    >>> k = make_kernel("fractional", H=0.75)
    >>> round(k.alpha, 12), round(k.c1, 12)
    (-0.25, 0.1875)
    """
    family_tag = str(family_tag).lower()
    if family_tag == "fractional":
        H = float(params.pop("H"))
        if params:
            raise KernelError(f"unexpected parameters {sorted(params)}")
        _check_hurst("H", H)
        e = H - 0.5
        g, g1, g2, gint = _power_term(e)
        c = abs(e * (e - 1.0))
        return KernelSpec(g, g1, g2, 0.5 - H, 0.5 - H, c, c, "fractional", {"H": H}, gint)

    if family_tag == "mixed":
        H = float(params.pop("H"))
        Hp = float(params.pop("Hp"))
        if params:
            raise KernelError(f"unexpected parameters {sorted(params)}")
        _check_hurst("H", H)
        _check_hurst("Hp", Hp)
        if not H < Hp:
            raise KernelError(f"mixed kernel needs H < Hp, got H={H}, Hp={Hp}")
        e, ep = H - 0.5, Hp - 0.5
        ga, g1a, g2a, gia = _power_term(e)
        gb, g1b, g2b, gib = _power_term(ep)
        c, cp = e * (e - 1.0), ep * (ep - 1.0)
        # On u <= -1 the ratio |g''| (-u)^(2 - ep) = |c v^(e - ep) + cp|, v >= 1, is
        # linear in s = v^(e - ep) in (0, 1]: the max sits at an endpoint.
        c1 = max(abs(c + cp), abs(cp))
        # On [-2, 0) the ratio |g''| (-u)^(2 - e) = |c + cp v^(ep - e)|, v <= 2.
        c2 = max(abs(c), abs(c + cp * 2.0 ** (ep - e)))
        return KernelSpec(
            lambda u: ga(u) + gb(u),
            lambda u: g1a(u) + g1b(u),
            lambda u: g2a(u) + g2b(u),
            0.5 - Hp,
            0.5 - H,
            c1,
            c2,
            "mixed",
            {"H": H, "Hp": Hp},
            lambda u: gia(u) + gib(u),
        )

    raise KernelError(f"unknown kernel family {family_tag!r}; use fractional, mixed or custom_kernel()")


def custom_kernel(g, g1, g2, alpha, zeta, c1, c2, gint=None, name="custom"):
    """Wrap user-supplied callables; the constants are candidates to certify.

    The callables are masked so that they vanish on ``u >= 0``.
    """
    if not alpha > -0.5:
        raise KernelError("alpha must exceed -1/2")
    if not zeta < 0.5:
        raise KernelError("zeta must be below 1/2")

    def masked(f):
        def wrapped(u):
            u = np.asarray(u, dtype=float)
            with np.errstate(all="ignore"):
                return np.where(u < 0, f(np.minimum(u, -1e-300)), 0.0)

        return wrapped

    return KernelSpec(
        masked(g), masked(g1), masked(g2), float(alpha), float(zeta), float(c1), float(c2),
        "custom", {"name": name}, None if gint is None else masked(gint),
    )


# ---------------------------------------------------------------------------
# certificate
# ---------------------------------------------------------------------------


@dataclass
class C2Report:
    """Maximal |lhs| / |rhs| ratio per inequality, and any failed points."""

    ratios: dict
    failed_points: list
    tolerance: float
    passed: bool

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "tolerance": self.tolerance,
            "ratios": {k: float(v) for k, v in self.ratios.items()},
            "failed_points": [(name, float(u)) for name, u in self.failed_points],
        }


def default_c2_grid(n_tail=400, n_near=400, far=1e6, near=1e-12):
    """Sample points: log-spaced on ``[-far, -1]`` and geometric toward ``0-`` on ``[-2, 0)``."""
    tail = -np.logspace(0.0, math.log10(far), n_tail)
    head = -np.logspace(math.log10(2.0), math.log10(near), n_near)
    return np.unique(np.concatenate([tail, head]))


def _ratio(lhs, rhs):
    lhs = np.abs(lhs)
    rhs = np.abs(rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > 0, np.inf, 0.0))
    return r


def verify_c2(kernel, grid=None, tol=1e-9):
    """Certify the kernel constants on a grid of sample points.

    Checks the second-derivative bounds on ``u <= -1`` (exponent ``alpha``)
    and on ``[-2, 0)`` (exponent ``zeta``), plus the first-derivative and
    value bounds they imply.  Evaluation failures (NaN, overflow) are listed
    as failed points rather than raised.
    """
    u = default_c2_grid() if grid is None else np.asarray(grid, dtype=float)
    u = u[u < 0]
    a, z, C1, C2 = kernel.alpha, kernel.zeta, kernel.c1, kernel.c2
    tail = u[u <= -1.0]
    head = u[u >= -2.0]
    checks = {}
    with np.errstate(all="ignore"):
        v = -tail
        checks["g2_tail"] = (tail, kernel.eval_g2(tail), C1 * v ** (-a - 2.0))
        checks["g1_tail"] = (tail, kernel.eval_g1(tail), C1 / (a + 1.0) * v ** (-(a + 1.0)))
        if a > 0:
            checks["g_tail"] = (tail, kernel.eval_g(tail), C1 / (a * (a + 1.0)) * v ** (-a))
        elif a < 0:
            cg = max(abs(float(kernel.eval_g(np.array(-1.0)))), C1 / ((a + 1.0) * -a))
            checks["g_tail"] = (tail, kernel.eval_g(tail), cg * v ** (-a))
        w = -head
        checks["g2_head"] = (head, kernel.eval_g2(head), C2 * w ** (-z - 2.0))
        if z > -1.0:
            cd = max(abs(float(kernel.eval_g1(np.array(-2.0)))), C2 / (z + 1.0))
            checks["g1_head"] = (head, kernel.eval_g1(head), cd * (1.0 + w ** (-z - 1.0)))
        elif z < -1.0:
            checks["g1_head"] = (head, kernel.eval_g1(head), C2 / (-z - 1.0) * w ** (-z - 1.0))
        # z == -1 gives a logarithm; no power bound is checked there
    ratios, failed = {}, []
    for name, (pts, lhs, rhs) in checks.items():
        lhs = np.asarray(lhs, dtype=float) * np.ones_like(pts)
        rhs = np.asarray(rhs, dtype=float) * np.ones_like(pts)
        bad = ~np.isfinite(lhs) | ~np.isfinite(rhs)
        failed.extend((name, p) for p in pts[bad])
        r = _ratio(lhs[~bad], rhs[~bad])
        ratios[name] = float(r.max()) if r.size else 0.0
    passed = not failed and all(r <= 1.0 + tol for r in ratios.values())
    return C2Report(ratios, failed, tol, passed)


def increment_variance(kernel, t):
    """``int (g(u - t) - g(u))^2 du``, the variance of ``G_t``, by adaptive quadrature."""
    t = float(t)
    if t <= 0:
        return 0.0

    def f(u):
        return (float(kernel.eval_g(u - t)) - float(kernel.eval_g(u))) ** 2

    pieces = [(-np.inf, -t - 1.0), (-t - 1.0, -t), (-t, 0.0), (0.0, t)]
    total = 0.0
    for lo, hi in pieces:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, err = integrate.quad(f, lo, hi, limit=400, epsabs=1e-13, epsrel=1e-10)
        if not np.isfinite(val):
            raise QuadratureError("variance integral diverged", where=(lo, hi))
        total += val
    return total


def fractional_variance_constant(H):
    """Closed form of ``Var(G_1)`` for ``fractional(H)`` with unit normalisation.

    ``Var(G_1) = Gamma(H + 1/2)^2 / (2H sin(pi H) Gamma(2H))``.
    """
    H = float(H)
    return special.gamma(H + 0.5) ** 2 / (2.0 * H * math.sin(math.pi * H) * special.gamma(2.0 * H))


# ---------------------------------------------------------------------------
# conjugate kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConjugateKernel:
    """A conjugate kernel ``h`` on ``u < 0`` with derivative and antiderivative.

    ``eval_hint(v)`` is ``int_0^v h(-s) ds`` for ``v >= 0``.
    """

    eval_h: Callable
    eval_h1: Callable
    eval_hint: Optional[Callable] = None
    name: str = "custom"


def fractional_conjugate(H, normalization="unit"):
    """Conjugate kernel of ``fractional(H)``: ``h(u) = c (-u)^(1/2 - H)``.

    ``normalization="unit"`` takes ``c = 1``, matching the unit-normalised
    Wiener-level transform.  ``"laplace"`` picks ``c`` so that
    ``L_h(p) p^2 L_g(p) = 1``, namely ``c = 1 / (Gamma(3/2 - H) Gamma(H + 1/2))``.
    """
    _check_hurst("H", H)
    e = 0.5 - H
    if normalization == "unit":
        c = 1.0
    elif normalization == "laplace":
        c = 1.0 / (special.gamma(1.5 - H) * special.gamma(H + 0.5))
    else:
        raise KernelError(f"unknown normalization {normalization!r}")

    def h(u):
        v, m = _neg(u)
        return np.where(m, c * v**e, 0.0 if e > 0 else (c if e == 0 else np.inf))

    def h1(u):
        v, m = _neg(u)
        return np.where(m, -c * e * v ** (e - 1.0), 0.0)

    def hint(v):
        v = np.asarray(v, dtype=float)
        return c * np.maximum(v, 0.0) ** (e + 1.0) / (e + 1.0)

    return ConjugateKernel(h, h1, hint, f"fractional_conjugate(H={H:g})")


def laplace_transform(f, p, t_lap=None, singular=True):
    """``int_0^inf e^{-pt} f(t) dt`` by adaptive quadrature with a tail estimate.

    Returns ``(value, tail_bound)``.  The integral is cut at ``t_lap`` where
    ``e^{-p t_lap}`` is negligible; the dropped tail is bounded by
    ``|f(t_lap)| e^{-p t_lap} / p`` for the monotone integrands used here.
    """
    p = float(p)
    if t_lap is None:
        t_lap = 40.0 / p
    pieces = [(0.0, min(1.0, t_lap))] if singular else []
    if t_lap > 1.0 or not singular:
        pieces.append((1.0 if singular else 0.0, t_lap))
    total = 0.0
    for lo, hi in pieces:
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, _ = integrate.quad(lambda t: math.exp(-p * t) * float(f(t)), lo, hi, limit=400,
                                        epsabs=1e-14, epsrel=1e-11)
            except (integrate.IntegrationWarning, ZeroDivisionError, OverflowError) as exc:
                raise QuadratureError(f"Laplace quadrature failed at p={p}: {exc}", where=p) from exc
        if not np.isfinite(val):
            raise QuadratureError(f"Laplace quadrature not finite at p={p}", where=p)
        total += val
    tail = abs(float(f(t_lap))) * math.exp(-p * t_lap) / p
    return total, tail


def laplace_conjugate_check(kernel, h, p_grid=None):
    """Maximum over ``p`` of ``|L_h(p) p^2 L_g(p) - 1|``.

    ``kernel`` may be a :class:`KernelSpec` or a callable on ``t > 0``
    (the kernel read as ``t -> g(-t)``); likewise ``h`` may be a
    :class:`ConjugateKernel` or a callable on ``t > 0``.

    Returns ``(max_error, errors)`` with the per-``p`` errors.
    """
    p_grid = np.geomspace(0.1, 10.0, 25) if p_grid is None else np.asarray(p_grid, dtype=float)
    if np.any(p_grid <= 0):
        raise ValueError("p_grid must be positive")
    gf = (lambda t: kernel.eval_g(-t)) if isinstance(kernel, KernelSpec) else kernel
    hf = (lambda t: h.eval_h(-t)) if isinstance(h, ConjugateKernel) else h
    errors = np.empty(p_grid.size)
    for i, p in enumerate(p_grid):
        lg, _ = laplace_transform(gf, p)
        lh, _ = laplace_transform(hf, p)
        errors[i] = abs(lh * p * p * lg - 1.0)
    return float(errors.max()), errors
