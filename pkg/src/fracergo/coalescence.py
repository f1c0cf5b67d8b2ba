"""
Coalescent coupling: sticking drift, Wiener-level transform and Girsanov cost.

The second leg receives an extra noise-level drift ``phi`` that glues it to
the first leg,

    phi(t) = -2 w rho / |rho|^beta,   rho = y - x,   w = 2 |x - y|^beta / (sigma beta),

with ``0 / 0 = 0``.  Along the flow ``|rho|^beta`` decreases at rate at least
``2 w sigma beta`` (monotone drift), so the legs meet by ``t = 1/4`` and stay
together.  Shifting the noise by ``int phi`` is the same as shifting the
driving Wiener process by ``int Psi``, where ``Psi`` solves the conjugate
Volterra equation.  The price of the shift in total variation is read off
the Girsanov density ``D = exp(int Psi dW - 1/2 int Psi^2)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate as sint
from scipy import stats

from .coupling import CoupledTrajectory, coupled_noise, synchronous_couple
from .dynamics import default_burn_in
from .kernels import ConjugateKernel
from .noise import replica_generator, sample_wiener, standard_normals, synthesize_noise

__all__ = [
    "CoalescenceError",
    "StickingPlan",
    "GirsanovReport",
    "TwoStageReport",
    "sticking_drift",
    "run_sticking_pair",
    "fbm_transform_matrix",
    "inverse_kernel_transform_fbm",
    "tail_transform_fbm",
    "inverse_kernel_transform_general",
    "psi_cells",
    "girsanov_density",
    "girsanov_tv_bound",
    "sticking_girsanov",
    "sticking_threshold",
    "two_stage_tv_estimate",
]

_GIRSANOV_STREAM = 4
_UNIFORM_STREAM = 5


class CoalescenceError(ValueError):
    pass


def _scalar_sigma(sigma):
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        val = float(s)
    elif s.ndim == 1 and np.all(s == s[0]):
        val = float(s[0])
    elif s.ndim == 2 and np.allclose(s, s[0, 0] * np.eye(s.shape[0])):
        val = float(s[0, 0])
    else:
        raise CoalescenceError("sticking needs sigma to be a positive multiple of the identity")
    if val <= 0:
        raise CoalescenceError("sigma must be positive")
    return val


def sticking_drift(rho, varpi, beta):
    """``-2 varpi rho / |rho|^beta`` with the zero convention at ``rho = 0``."""
    rho = np.asarray(rho, dtype=float)
    r = np.linalg.norm(rho, axis=-1, keepdims=True)
    varpi = np.asarray(varpi, dtype=float)
    if varpi.ndim:
        varpi = varpi.reshape(varpi.shape + (1,) * (rho.ndim - varpi.ndim))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, -2.0 * varpi * rho / np.where(r > 0, r, 1.0) ** beta, 0.0)


@dataclass
class StickingPlan:
    """Sticking drift recorded on the grid of the sticking window.

    ``phi`` and ``phi_prime`` are node values of the analytic drift and its
    time derivative; ``phi_applied`` is the per-step drift the integrator
    actually used; ``kink_index`` marks the first node with ``rho = 0``.
    """

    beta: float
    sigma: float
    varpi: np.ndarray
    grid: np.ndarray
    phi: np.ndarray
    phi_prime: np.ndarray
    phi_applied: np.ndarray
    initial_gap: np.ndarray
    coalescence_time: np.ndarray
    kink_index: np.ndarray
    success: np.ndarray
    psi: Optional[np.ndarray] = None
    psi_tail: Optional[np.ndarray] = None
    gap: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def phi_sup(self):
        return np.max(np.linalg.norm(self.phi, axis=-1), axis=-1)

    @property
    def phi_prime_sup(self):
        return np.max(np.linalg.norm(self.phi_prime, axis=-1), axis=-1)


def run_sticking_pair(drift, sigma, kernel, x, y, beta=0.25, noise=None, T=1.0, start=0, tol=1e-6,
                      seed=0, n=1, step=1e-3, window=1.0):
    """Integrate the pair ``(x, y)`` with the sticking drift on the second leg.

    Both legs share ``noise`` (synthesized from ``kernel`` when ``None``).
    The drift acts on ``[0, window)`` measured from grid index ``start``.  Each step
    applies the drift difference explicitly and then the exact sticking flow
    ``|rho|^beta <- max(|rho|^beta - 2 varpi sigma beta dt, 0)``, direction
    preserved, so the legs meet exactly instead of oscillating around each other.
    """
    if not (0.0 < beta < 0.5):
        raise CoalescenceError("beta must lie in (0, 1/2)")
    sig = _scalar_sigma(sigma)
    d = drift.d
    if noise is None:
        noise = coupled_noise(kernel, T, step, seed, np.arange(n), d)
    dG = np.diff(noise.values[:, start:], axis=1)
    times = noise.grid[start:] - noise.grid[start]
    keep = times <= T + 1e-9
    times = times[keep]
    n_steps = times.size - 1
    dG = dG[:, :n_steps]
    dt = np.diff(times)
    n_rep = dG.shape[0]
    x = np.broadcast_to(np.asarray(x, dtype=float), (n_rep, d)).copy()
    y = np.broadcast_to(np.asarray(y, dtype=float), (n_rep, d)).copy()
    gap0 = np.linalg.norm(y - x, axis=-1)
    varpi = 2.0 * gap0**beta / (sig * beta)
    X = np.empty((n_rep, n_steps + 1, d))
    Y = np.empty_like(X)
    phi = np.zeros_like(X)
    dphi = np.zeros_like(X)
    applied = np.zeros((n_rep, n_steps, d))
    X[:, 0], Y[:, 0] = x, y
    for i in range(n_steps + 1):
        rho = y - x
        active = times[i] < window - 1e-12
        if active:
            phi[:, i] = sticking_drift(rho, varpi, beta)
            # d/dt of phi along rho' = b(y) - b(x) + sigma phi
            rdot = drift.b(y) - drift.b(x) + sig * phi[:, i]
            r = np.linalg.norm(rho, axis=-1, keepdims=True)
            with np.errstate(divide="ignore", invalid="ignore"):
                inner = np.sum(rho * rdot, axis=-1, keepdims=True)
                val = -2.0 * varpi[:, None] * (rdot / r**beta - beta * rho * inner / r ** (beta + 2.0))
            dphi[:, i] = np.where(r > 0, val, 0.0)
        if i == n_steps:
            break
        h = dt[i]
        x_new = x + drift.b(x) * h + sig * dG[:, i]
        y_tmp = y + drift.b(y) * h + sig * dG[:, i]
        rho_t = y_tmp - x_new
        if active:
            r_t = np.linalg.norm(rho_t, axis=-1, keepdims=True)
            r_beta = np.maximum(r_t**beta - 2.0 * varpi[:, None] * sig * beta * h, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(r_t > 0, r_beta ** (1.0 / beta) / np.where(r_t > 0, r_t, 1.0), 0.0)
            rho_new = rho_t * scale
            applied[:, i] = (rho_new - rho_t) / (sig * h)
        else:
            rho_new = rho_t
        x, y = x_new, x_new + rho_new
        X[:, i + 1], Y[:, i + 1] = x, y
    gap = np.linalg.norm(X - Y, axis=-1)
    zero = gap == 0.0
    hit = np.where(zero.any(axis=1), zero.argmax(axis=1), -1)
    ctime = np.where(hit >= 0, times[np.maximum(hit, 0)], np.inf)
    # one-sided difference at the kink
    rows = np.nonzero(hit > 0)[0]
    for r in rows:
        k = hit[r]
        if times[k] < window:
            dphi[r, k] = (phi[r, k] - phi[r, k - 1]) / dt[k - 1]
    late = times >= 0.5 - 1e-12
    success = np.all(gap[:, late] <= tol, axis=1) if late.any() else np.ones(n_rep, bool)
    same = gap0 == 0.0
    success = success | same
    plan = StickingPlan(beta, sig, varpi, times, phi, dphi, applied, gap0, ctime, hit, success, gap=gap)
    traj = CoupledTrajectory(times, X, Y, noise)
    return traj, plan


# ---------------------------------------------------------------------------
# Wiener-level transforms
# ---------------------------------------------------------------------------


def _prim(u, e):
    """Antiderivative of ``u^e`` on ``u >= 0``."""
    if e == -1.0:
        with np.errstate(divide="ignore"):
            return np.log(u)
    with np.errstate(divide="ignore"):
        return u ** (e + 1.0) / (e + 1.0)


def _power_moments(ua, ub, e):
    """``I0 = int_ub^ua u^e du`` and ``J = int_ub^ua u^(e+1) du`` (``ua > ub >= 0``)."""
    I0 = _prim(ua, e) - np.where(ub > 0, _prim(np.where(ub > 0, ub, 1.0), e), 0.0 if e > -1 else -np.inf)
    J = _prim(ua, e + 1.0) - np.where(ub > 0, _prim(np.where(ub > 0, ub, 1.0), e + 1.0), 0.0)
    return I0, J


def _linear_weights(t, s, e):
    """Matrix ``M`` with ``int_{s_0}^{min(t, s_end)} (t - s)^e phi(s) ds = M @ phi`` for piecewise-linear ``phi``.

    Exact product integration; rows with a divergent integral are ``inf``.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    M = np.zeros((t.size, s.size))
    hs = np.diff(s)
    for i, ti in enumerate(t):
        m = np.searchsorted(s, ti + 1e-12 * max(1.0, abs(ti)), side="right") - 1  # cells fully before ti
        m = min(m, s.size - 1)
        if m <= 0:
            continue
        ua = ti - s[:m]
        ub = np.maximum(ti - s[1 : m + 1], 0.0)
        I0, J = _power_moments(ua, ub, e)
        I1 = ua * I0 - J  # int u^e (ua - u) du = int (t-s)^e (s - s_j) ds
        M[i, :m] += I0 - I1 / hs[:m]
        M[i, 1 : m + 1] += I1 / hs[:m]
    return M


def fbm_transform_matrix(grid, H):
    """Matrix ``M`` with ``Psi = M @ phi`` on ``grid`` (piecewise-linear ``phi``, unit constants).

    ``H < 1/2``: ``Psi(t) = (1/2 - H) int_0^t (t - s)^(-1/2 - H) phi(s) ds``.
    ``H > 1/2``: ``Psi(t) = phi(0) t^(1/2 - H) + int_0^t phi'(s) (t - s)^(1/2 - H) ds``.
    Row 0 for ``H > 1/2`` is left at zero; the singular value is handled by the caller.
    """
    if not (0.0 < H < 1.0):
        raise CoalescenceError("H must lie in (0, 1)")
    grid = np.asarray(grid, dtype=float)
    if H == 0.5:
        return np.eye(grid.size)
    if H < 0.5:
        return (0.5 - H) * _linear_weights(grid, grid, -0.5 - H)
    b = 0.5 - H
    n = grid.size
    hs = np.diff(grid)
    M = np.zeros((n, n))
    t = grid[1:]
    M[1:, 0] = (t - grid[0]) ** b
    for i in range(1, n):
        ti = grid[i]
        ua = ti - grid[:i]
        ub = ti - grid[1 : i + 1]
        I0, _ = _power_moments(ua, ub, b)
        slope = I0 / hs[:i]
        M[i, :i] -= slope
        M[i, 1 : i + 1] += slope
    return M


def _apply_time(M, phi):
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        return M @ phi
    return np.einsum("ij,...jd->...id", M, phi if phi.ndim >= 2 else phi[..., None])


def inverse_kernel_transform_fbm(phi, grid, H):
    """Wiener-level drift ``Psi`` for fractional noise (unit constants).

    ``phi`` has time on axis ``-2`` (or is 1-D).  For ``H > 1/2`` the value at
    ``t = 0`` is ``+-inf`` unless ``phi(0) = 0``.
    """
    grid = np.asarray(grid, dtype=float)
    if not (0.0 < H < 1.0):
        raise CoalescenceError("H must lie in (0, 1)")
    psi = _apply_time(fbm_transform_matrix(grid, H), phi)
    if H > 0.5:
        phi = np.asarray(phi, dtype=float)
        p0 = phi[0] if phi.ndim == 1 else phi[..., 0, :]
        v0 = np.where(p0 == 0, 0.0, np.sign(p0) * np.inf)
        if phi.ndim == 1:
            psi[0] = v0
        else:
            psi[..., 0, :] = v0
    return psi


def tail_transform_fbm(phi, grid, H, tail_grid, tol=1e-9):
    """``Psi(t) = int_0^1/2 (t - s)^(-H - 1/2) phi(s) ds`` for ``t`` on ``tail_grid`` (``t >= 1``).

    Requires ``phi = 0`` on ``(1/2, 1]``.  Returns ``(psi_tail, decay_ok)``
    where ``decay_ok`` checks ``|Psi(t)| <= 1/2 sup|phi| (t - 1/2)^(-H - 1/2)``.
    """
    grid = np.asarray(grid, dtype=float)
    tail_grid = np.asarray(tail_grid, dtype=float)
    phi = np.asarray(phi, dtype=float)
    late = grid > 0.5 + 1e-12
    ph = phi if phi.ndim > 1 else phi[:, None]
    mag = np.linalg.norm(ph, axis=-1)
    scale = max(1.0, float(np.max(mag)) if mag.size else 0.0)
    if np.any(mag[..., late] > tol * scale):
        raise CoalescenceError("phi is not zero on (1/2, 1]: the legs did not stick")
    if tail_grid.size and tail_grid.min() < grid.max():
        raise CoalescenceError("tail grid must start after the sticking window")
    M = _linear_weights(tail_grid, grid, -H - 0.5)
    psi = _apply_time(M, phi)
    env = 0.5 * np.max(mag, axis=-1)[..., None] * (tail_grid - 0.5) ** (-H - 0.5)
    pm = np.abs(psi) if psi.ndim == mag.ndim else np.linalg.norm(psi, axis=-1)
    return psi, bool(np.all(pm <= env * (1 + 1e-9) + 1e-300))


def _hint_values(hk, v):
    v = np.asarray(v, dtype=float)
    if hk.eval_hint is not None:
        return hk.eval_hint(v)
    flat = np.unique(np.concatenate([[0.0], v.ravel()]))
    acc = np.zeros(flat.size)
    for k in range(1, flat.size):
        val, _ = sint.quad(lambda u: float(hk.eval_h(np.array(-u))), flat[k - 1], flat[k], limit=200)
        acc[k] = acc[k - 1] + val
    return np.interp(v, flat, acc)


def _check_regime(hk, regime, tol):
    if regime == "C3_i":
        near = np.array([-1e-12, -1e-9])
        hv = np.abs(hk.eval_h(near))
        vanishing = hv[0] <= tol or (hv[0] < hv[1] and np.log(hv[1] / hv[0]) / np.log(1e3) > 0.01)
        if not vanishing:
            raise CoalescenceError("C3_i needs h(0-) = 0; h does not vanish at 0-")
        with warnings.catch_warnings():
            warnings.simplefilter("error", sint.IntegrationWarning)
            try:
                total, _ = sint.quad(lambda u: abs(float(hk.eval_h1(np.array(-u)))), 0.0, 1.0, limit=400)
            except sint.IntegrationWarning as exc:
                raise CoalescenceError(f"C3_i needs h' integrable near 0: {exc}") from exc
        if not np.isfinite(total):
            raise CoalescenceError("C3_i needs h' integrable near 0")
        return total
    if regime == "C3_ii":
        with warnings.catch_warnings():
            warnings.simplefilter("error", sint.IntegrationWarning)
            try:
                total, _ = sint.quad(lambda u: float(hk.eval_h(np.array(-u))) ** 2, 0.0, 1.0, limit=400)
            except sint.IntegrationWarning as exc:
                raise CoalescenceError(f"C3_ii needs h square integrable near 0: {exc}") from exc
        if not np.isfinite(total):
            raise CoalescenceError("C3_ii needs h square integrable near 0")
        return total
    raise CoalescenceError(f"unknown regime {regime!r}")


def inverse_kernel_transform_general(phi, grid, h, regime="C3_ii", tol=1e-8, return_bound=False):
    """``Psi = d/dt int_0^t h(s - t) phi(s) ds`` for a supplied conjugate kernel.

    ``C3_i`` uses ``Psi(t) = -int_0^t h'(s - t) phi(s) ds`` (requires
    ``h(0-) = 0``); ``C3_ii`` uses ``h(-t) phi(0) + int_0^t h(s - t) phi'(s) ds``.
    Both are exact for piecewise-linear ``phi``.  With ``return_bound`` the
    ``C3_i`` sup bound ``int_0^1 |h'(-u)| du * sup|phi|`` is also returned.
    """
    if not isinstance(h, ConjugateKernel):
        raise CoalescenceError("h must be a ConjugateKernel")
    const = _check_regime(h, regime, tol)
    grid = np.asarray(grid, dtype=float)
    n = grid.size
    hs = np.diff(grid)
    M = np.zeros((n, n))
    diff = grid[:, None] - grid[None, :]  # t_i - s_j
    Ivals = _hint_values(h, np.maximum(diff, 0.0))
    for i in range(n):
        if i:
            dI = Ivals[i, :i] - Ivals[i, 1 : i + 1]
            slope = dI / hs[:i]
        if regime == "C3_ii":
            M[i, 0] += float(h.eval_h(np.array(-grid[i] + grid[0]))) if i else float(h.eval_h(np.array(0.0)))
            if i:
                M[i, :i] -= slope
                M[i, 1 : i + 1] += slope
        else:
            if not i:
                continue
            hb = h.eval_h(grid[1 : i + 1] - grid[i])  # h(s_{j+1} - t)
            ha = h.eval_h(grid[:i] - grid[i])  # h(s_j - t)
            hb = np.where(np.arange(1, i + 1) == i, 0.0, hb)  # h(0-) = 0
            M[i, :i] += -(hb - ha)
            # phi'_j (-h(s_{j+1} - t) h_j + dI_j) with phi'_j = (phi_{j+1} - phi_j) / h_j
            coef = -hb * hs[:i] + dI
            M[i, :i] -= coef / hs[:i]
            M[i, 1 : i + 1] += coef / hs[:i]
    psi = _apply_time(M, phi)
    if return_bound:
        p = np.asarray(phi, dtype=float)
        return psi, const * float(np.max(np.abs(p))) if regime == "C3_i" else np.inf
    return psi


# ---------------------------------------------------------------------------
# Girsanov
# ---------------------------------------------------------------------------


def psi_cells(psi, phi, grid, H):
    """Adapted per-cell values of ``Psi`` (left node), fixing the singular first cell.

    For ``H > 1/2`` the first cell carries the RMS of the leading term
    ``phi(0) t^(1/2 - H)``, i.e. ``phi(0) h^b / sqrt(2b + 1)``, ``b = 1/2 - H``.
    """
    psi = np.array(psi, dtype=float)
    cells = psi[..., :-1, :] if psi.ndim >= 2 else psi[:-1]
    cells = cells.copy()
    if H > 0.5:
        b = 0.5 - H
        h0 = grid[1] - grid[0]
        p0 = np.asarray(phi)[..., 0, :] if np.ndim(phi) >= 2 else np.asarray(phi)[0]
        v0 = p0 * h0**b / math.sqrt(2 * b + 1)
        if cells.ndim >= 2:
            cells[..., 0, :] = v0
        else:
            cells[0] = v0
    return cells


@dataclass
class GirsanovReport:
    l2_psi: float
    tv_bound: float
    ci: tuple
    tv_plus: float
    tv_plus_ci: tuple
    e_abs: float
    e_d: float
    e_d_ci: tuple
    n: int
    oracle: Optional[float] = None
    trivial: bool = False
    density: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def success_prob(self):
        return 1.0 - self.tv_bound

    def to_dict(self):
        out = {"l2_psi": self.l2_psi, "tv_bound": self.tv_bound, "ci": list(self.ci), "e_d": self.e_d,
               "e_d_ci": list(self.e_d_ci), "tv_plus": self.tv_plus, "tv_plus_ci": list(self.tv_plus_ci),
               "e_abs_d_minus_1": self.e_abs, "n": self.n, "trivial": self.trivial}
        if self.oracle is not None:
            out["oracle"] = self.oracle
        return out


def girsanov_density(cells, dW, dt):
    """``exp(sum Psi dW - 1/2 sum |Psi|^2 dt)`` per draw; time on axis ``-2``."""
    cells = np.asarray(cells, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if cells.ndim == 1:
        cells = cells[:, None]
    expo = np.sum(cells * dW, axis=(-2, -1)) - 0.5 * np.sum(np.sum(cells**2, axis=-1) * dt, axis=-1)
    return np.exp(expo)


def _mean_ci(x, level=0.95):
    z = stats.norm.ppf(0.5 + level / 2)
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return m, (m - z * se, m + z * se)


def _report_from_density(D, l2, oracle=None, keep=False):
    n = D.size
    e_d, e_d_ci = _mean_ci(D)
    plus, plus_ci = _mean_ci(np.maximum(D - 1.0, 0.0))
    half_abs = 0.5 * np.abs(D - 1.0)
    tv, tv_ci = _mean_ci(half_abs)
    trivial = False
    if np.mean(D * D) > 1e6:
        warnings.warn("Girsanov density variance exploded; reporting the trivial bound", RuntimeWarning)
        tv, tv_ci, trivial = 1.0, (1.0, 1.0), True
    return GirsanovReport(float(l2), min(tv, 1.0), tv_ci, plus, plus_ci, 2 * float(np.mean(half_abs)), e_d, e_d_ci,
                          n, oracle, trivial, D if keep else None)


def girsanov_tv_bound(psi, dt, n_mc=None, seed=0, dW=None, batch=5000, keep_density=False):
    """Monte Carlo total-variation bound for a Wiener-level shift ``Psi``.

    ``psi`` holds per-cell values with time on axis ``-2`` (a 1-D array is
    one-dimensional).  A deterministic ``psi`` is paired with ``n_mc`` fresh
    Wiener draws and the exact mean-shift value ``2 Phi(L/2) - 1``,
    ``L^2 = int |Psi|^2``, is attached as ``oracle``.  An adapted ``psi`` comes
    with its own increments ``dW`` (same shape).

    ``tv_bound`` is ``E|D - 1| / 2``, which equals ``E[(D - 1)_+]`` in
    expectation and lies in ``[0, 1]``.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    dt = np.broadcast_to(np.asarray(dt, dtype=float), psi.shape[-2:-1])
    if dW is None:
        if n_mc is None:
            raise CoalescenceError("need n_mc for a deterministic psi")
        l2 = float(np.sum(np.sum(psi**2, axis=-1) * dt))
        Ds = []
        for r0 in range(0, n_mc, batch):
            reps = np.arange(r0, min(n_mc, r0 + batch))
            z = standard_normals(seed, reps, _GIRSANOV_STREAM, 0, psi.shape) * np.sqrt(dt)[None, :, None]
            Ds.append(girsanov_density(psi[None], z, dt))
        D = np.concatenate(Ds)
        oracle = float(2 * stats.norm.cdf(math.sqrt(l2) / 2) - 1)
        return _report_from_density(D, l2, oracle, keep_density)
    dW = np.asarray(dW, dtype=float)
    if dW.ndim == psi.ndim - 1:
        dW = dW[..., None]
    D = girsanov_density(psi, dW, dt)
    l2 = float(np.mean(np.sum(np.sum(psi**2, axis=-1) * dt, axis=-1)))
    return _report_from_density(np.atleast_1d(D), l2, None, keep_density)


def sticking_girsanov(drift, sigma, kernel, x, y, beta=0.25, n_mc=1000, seed=0, step=1e-3, noise=None,
                      start=0, keep_density=False):
    """Full pipeline per draw: noise, sticking pair, ``Psi`` and the Girsanov density.

    Fractional kernels only (the closed-form conjugate).  Returns
    ``(GirsanovReport, StickingPlan)``; ``Psi`` is recomputed for every draw
    and paired with that draw's Wiener increments on the sticking window.
    """
    if kernel.family_tag != "fractional":
        raise CoalescenceError("closed-form transform available for fractional kernels only")
    H = kernel.params["H"]
    if noise is None:
        noise = coupled_noise(kernel, 1.0, step, seed, np.arange(n_mc), drift.d)
    traj, plan = run_sticking_pair(drift, sigma, kernel, x, y, beta, noise, T=1.0, start=start)
    grid = plan.grid
    psi = inverse_kernel_transform_fbm(plan.phi, grid, H)
    cells = psi_cells(psi, plan.phi, grid, H)
    plan.psi = psi
    w = noise.wiener
    i0 = int(round(noise.grid[start] / w.step))
    dW = w.fut_incr[:, i0 : i0 + grid.size - 1]
    rep = girsanov_tv_bound(cells, np.diff(grid), dW=dW, keep_density=keep_density)
    return rep, plan


# ---------------------------------------------------------------------------
# two-stage estimate
# ---------------------------------------------------------------------------


def sticking_threshold(mean_gap, kappa_tv):
    """Gap threshold balancing ``E[gap] / eps`` against ``eps^(kappa/2)``.

    Solving ``m / eps = eps^(kappa/2)`` gives ``eps = m^(2/(2 + kappa))``.
    """
    if mean_gap <= 0:
        return 0.0
    return float(mean_gap ** (2.0 / (2.0 + kappa_tv)))


@dataclass
class TwoStageReport:
    t: float
    epsilon: float
    estimate: float
    markov_term: float
    girsanov_term: float
    bound: float
    markov_bound_eps1: float
    epsilon_formula: float
    mean_gap: float
    coupling_failure: float
    coupling_failure_ci: tuple
    n: int

    def to_dict(self):
        out = dict(self.__dict__)
        out["coupling_failure_ci"] = [float(v) for v in self.coupling_failure_ci]
        return out


def two_stage_tv_estimate(drift, sigma, kernel, t, n=500, x0=3.0, epsilon=None, beta=0.25, seed=0, step=1e-2,
                          T_burn=None):
    """Estimate ``P(X_t != Y_t)`` for synchronous coupling on ``[0, t-1]`` and sticking on ``[t-1, t]``.

    ``Y`` is a stationary warm start sharing the Wiener past.  With
    ``x0="stationary"`` both legs coincide.  For a gap threshold ``eps``
    the estimate is ``P(gap > eps) + G(eps)`` with the Girsanov term
    ``G(eps) = E[1{gap <= eps} (D - 1)_+]``; it never exceeds the bound
    ``B(eps) = min(1, E gap / eps) + G(eps)``.

    ``epsilon=None`` minimises ``B`` over a geometric grid that contains
    :func:`sticking_threshold` of the mean gap; ``"formula"`` uses that
    threshold directly; a number is used as given.  ``markov_bound_eps1``
    is ``B(1)``.  The realised coupling-failure frequency is also reported.
    """
    if kernel.family_tag != "fractional":
        raise CoalescenceError("two-stage estimate needs a fractional kernel")
    H = kernel.params["H"]
    kappa_tv = 1.0 if H <= 0.5 else 0.5
    sync_T = max(t - 1.0, 0.0)
    tb = default_burn_in(kernel) if T_burn is None else float(T_burn)
    total = tb + sync_T + 1.0
    reps = np.arange(n)
    noise = coupled_noise(kernel, total, step, seed, reps, drift.d)
    ct = synchronous_couple(drift, sigma, x0, "stationary", kernel, sync_T + 1.0, seed, n, step, T_burn=tb,
                            noise=noise)
    i_s = int(round((tb + sync_T) / step))
    j_s = int(round(sync_T / step))
    xs, ys = ct.X[:, j_s], ct.Y[:, j_s]
    gap = np.linalg.norm(xs - ys, axis=-1)
    mean_gap = float(gap.mean())
    _, plan = run_sticking_pair(drift, sigma, kernel, xs, ys, beta, noise, T=1.0, start=i_s)
    grid = plan.grid
    psi = inverse_kernel_transform_fbm(plan.phi, grid, H)
    cells = psi_cells(psi, plan.phi, grid, H)
    dW = noise.wiener.fut_incr[:, i_s : i_s + grid.size - 1]
    D = girsanov_density(cells, dW, np.diff(grid))
    excess = np.maximum(D - 1.0, 0.0)
    # legs that failed to stick count as failures
    excess = np.where(plan.success, excess, 1.0)

    def girsanov_term(e):
        return float(np.mean(np.where(gap <= e, excess, 0.0)))

    def bound(e):
        markov = 1.0 if mean_gap == 0 else min(1.0, mean_gap / e)
        return markov + girsanov_term(e)

    eps_formula = sticking_threshold(mean_gap, kappa_tv)
    if epsilon is None:
        if mean_gap == 0:
            eps = 1.0
        else:
            cand = np.unique(np.concatenate([np.geomspace(max(mean_gap, 1e-12) * 1e-2, 1.0, 80), [eps_formula, 1.0]]))
            cand = cand[(cand > 0) & (cand <= 1.0)]
            eps = float(cand[np.argmin([bound(e) for e in cand])])
    elif epsilon == "formula":
        eps = eps_formula
    else:
        eps = float(epsilon)
    close = gap <= eps
    markov = float(np.mean(~close))
    girs = girsanov_term(eps)
    if mean_gap == 0:
        b_eps, b_one = girs, girsanov_term(1.0)
    else:
        b_eps, b_one = bound(eps), bound(1.0)
    u = replica_generator(seed, _UNIFORM_STREAM).uniform(size=n)
    success = close & plan.success & (u <= np.minimum(1.0, D))
    from .metrics import tv_from_coupling

    fail = tv_from_coupling(success)
    return TwoStageReport(float(t), eps, markov + girs, markov, girs, b_eps, b_one, eps_formula, mean_gap,
                          fail.estimate, (fail.ci_low, fail.ci_high), n)
