"""
Drift fields, the pathwise solution map, and warm starts.

The SDE ``dX = b(X) dt + sigma dG`` is solved pathwise: given a noise path
the explicit scheme

    X_{n+1} = X_n + b(X_n) dt + sigma (G_{n+1} - G_n) + extra_n dt

is a deterministic map.  Drifts are expected to be monotone
(``<x - y, b(x) - b(y)> <= 0``) and strictly contractive outside a ball;
:func:`verify_c1` tests both on sampled pairs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .noise import NoisePath, derive_seed, replica_generator, required_past, sample_wiener, synthesize_noise

__all__ = [
    "DriftError",
    "BlowUpError",
    "DriftSpec",
    "Trajectory",
    "C1Report",
    "make_flatbottom_drift",
    "make_linear_drift",
    "make_double_well_drift",
    "make_drift",
    "verify_c1",
    "as_sigma",
    "integrate",
    "ou_comparison_probe",
    "burn_in_stationary",
    "default_burn_in",
    "write_trajectory_csv",
]


class DriftError(ValueError):
    pass


class BlowUpError(FloatingPointError):
    """Non-finite state; ``time`` is the first grid time where it happened."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = time


@dataclass
class DriftSpec:
    b: Callable
    d: int
    kappa: float
    R: float
    growth_N: int = 1
    lipschitz: Optional[float] = None
    family: str = "custom"
    params: dict = field(default_factory=dict)
    certified: dict = field(default_factory=dict)
    rbar: Optional[float] = None
    kbar: Optional[float] = None

    def __call__(self, x):
        return self.b(x)

    def to_dict(self):
        out = {"family": self.family, **self.params}
        if self.rbar is not None:
            out.update(rbar=self.rbar, kbar=self.kbar)
        return out


def make_flatbottom_drift(R=1.0, kappa=1.0, d=1):
    """``b(x) = -kappa (|x| - R)_+ x / |x|``, minus the gradient of ``kappa (|x| - R)_+^2 / 2``."""
    if R < 0 or kappa <= 0:
        raise DriftError("need R >= 0 and kappa > 0")
    R, kappa = float(R), float(kappa)

    def b(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(r > R, -kappa * (r - R) / np.where(r > 0, r, 1.0), 0.0)
        return scale * x

    fam = "flatbottom" if R > 0 else "linear"
    return DriftSpec(b, int(d), kappa, R, 1, kappa, fam, {"R": R, "kappa": kappa})


def make_linear_drift(kappa=1.0, d=1):
    """``b(x) = -kappa x``."""
    return make_flatbottom_drift(0.0, kappa, d)


def make_double_well_drift():
    """``b(x) = x - x^3`` in one dimension.  Not monotone: a negative control."""

    def b(x):
        x = np.asarray(x, dtype=float)
        return x - x**3

    return DriftSpec(b, 1, 1.0, 1.0, 3, None, "doublewell", {})


def make_drift(spec, d=1):
    """Drift from a config mapping such as ``{"family": "flatbottom", "R": 1, "kappa": 1}``."""
    spec = dict(spec)
    fam = spec.pop("family")
    if fam == "flatbottom":
        return make_flatbottom_drift(spec.get("R", 1.0), spec.get("kappa", 1.0), d)
    if fam == "linear":
        return make_linear_drift(spec.get("kappa", 1.0), d)
    if fam == "doublewell":
        if d != 1:
            raise DriftError("the double-well drift is one-dimensional")
        return make_double_well_drift()
    raise DriftError(f"unknown drift family {fam!r}")


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------


@dataclass
class C1Report:
    monotone: bool
    max_inner: float
    witness: Optional[tuple]
    rbar: Optional[float]
    kbar: Optional[float]
    n_pairs: int

    @property
    def passed(self):
        return self.monotone

    def to_dict(self):
        w = None if self.witness is None else [np.asarray(v).tolist() for v in self.witness]
        return {"passed": self.monotone, "max_inner": self.max_inner, "witness": w,
                "rbar": self.rbar, "kbar": self.kbar, "n_pairs": self.n_pairs}


def _ball_points(rng, n, d, radius):
    """Points with radius uniform in [0, radius] and isotropic direction."""
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * rng.uniform(0.0, radius, (n, 1))


def verify_c1(drift, n_pairs=20000, radius=5.0, seed=0, tol=1e-10, rbar_grid=None, kbar_fraction=0.25):
    """Check monotonicity on sampled pairs and estimate the outer contraction constants.

    Pairs are drawn uniformly in radius within ``B(0, radius)``, plus
    boundary-stratified pairs around ``|x| = R`` and antipodal pairs
    ``(x, -x)``.  The monotonicity certificate fails when
    ``<x - y, b(x) - b(y)> > tol |x - y|^2`` for some pair; the pair with the
    largest inner product is returned as witness.

    ``(rbar, kbar)``: for each ``R'`` on a grid, ``kbar(R')`` is the smallest
    observed ``-<x - y, b(x) - b(y)> / |x - y|^2`` over pairs with
    ``|x| >= R'``.  ``rbar`` is the smallest grid value whose ``kbar`` reaches
    ``kbar_fraction * kappa``.
    """
    d = drift.d
    rng = replica_generator(seed, 0)
    x = _ball_points(rng, n_pairs, d, radius)
    y = _ball_points(rng, n_pairs, d, radius)
    # boundary-stratified and antipodal pairs
    m = max(64, n_pairs // 10)
    shell = drift.R * (1.0 + rng.uniform(-0.2, 0.2, (m, 1)))
    u = rng.standard_normal((m, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    xs = u * shell
    ys = _ball_points(rng, m, d, radius)
    r_line = np.linspace(radius / m, radius, m)[:, None]
    xa = u * r_line
    x = np.concatenate([x, xs, ys, xa, -u * drift.R])
    y = np.concatenate([y, ys, xs, -xa, u * radius])
    dx = x - y
    sq = np.sum(dx * dx, axis=1)
    keep = sq > 1e-14
    x, y, dx, sq = x[keep], y[keep], dx[keep], sq[keep]
    inner = np.sum(dx * (drift.b(x) - drift.b(y)), axis=1)
    rel = inner / sq
    monotone = bool(rel.max() <= tol)
    worst = int(np.argmax(inner))
    witness = None if monotone else (x[worst].copy(), y[worst].copy(), float(inner[worst]))
    rbar = kbar = None
    if monotone:
        grid = np.linspace(0.0, radius * 0.8, 81) if rbar_grid is None else np.asarray(rbar_grid)
        nx = np.linalg.norm(x, axis=1)
        target = kbar_fraction * drift.kappa
        for R_ in grid:
            sel = nx >= R_
            if not np.any(sel):
                break
            k_ = float(np.min(-rel[sel]))
            if k_ >= target:
                rbar, kbar = float(R_), k_
                break
    drift.certified["C1_i"] = monotone
    if rbar is not None:
        drift.rbar, drift.kbar = rbar, kbar
        drift.certified["C1_ii"] = True
    return C1Report(monotone, float(inner.max()), witness, rbar, kbar, int(x.shape[0]))


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    noise: Optional[NoisePath] = None
    extra: Optional[np.ndarray] = None

    def at(self, t):
        i = int(np.argmin(np.abs(self.times - t)))
        return self.values[:, i]


def as_sigma(sigma, d):
    """Diagonal of an invertible diagonal ``sigma`` (scalar, vector or matrix)."""
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        s = np.full(d, float(s))
    elif s.ndim == 2:
        if s.shape != (d, d) or np.any(s - np.diag(np.diag(s))):
            raise DriftError("sigma must be a diagonal d x d matrix")
        s = np.diag(s).copy()
    if s.shape != (d,):
        raise DriftError(f"sigma has shape {s.shape}, expected ({d},)")
    if np.any(s == 0):
        raise DriftError("sigma must be invertible")
    return s


def integrate(drift, sigma, x0, noise, extra_drift=None, start=0):
    """Explicit first-order scheme driven by ``noise`` from grid index ``start``.

    ``x0`` has shape ``(d,)`` or ``(n_rep, d)``.  ``extra_drift`` is either
    an array of per-step drifts ``(n_rep or 1, n_steps, d)`` or a callable
    ``f(n, t, x)`` returning the drift applied on step ``n``.
    """
    d = drift.d
    s = as_sigma(sigma, d)
    dG = np.diff(noise.values[:, start:], axis=1)
    times = noise.grid[start:]
    dt = np.diff(times)
    n_rep, n_steps = dG.shape[0], dG.shape[1]
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n_rep, d)).copy()
    out = np.empty((n_rep, n_steps + 1, d))
    out[:, 0] = x
    rec = None
    if callable(extra_drift):
        rec = np.zeros((n_rep, n_steps, d))
    for n in range(n_steps):
        step = drift.b(x) * dt[n] + s * dG[:, n]
        if extra_drift is not None:
            e = extra_drift(n, times[n], x) if callable(extra_drift) else extra_drift[:, n]
            if rec is not None:
                rec[:, n] = e
            step = step + e * dt[n]
        x = x + step
        out[:, n + 1] = x
        if not np.all(np.isfinite(x)):
            raise BlowUpError(f"non-finite state at t={times[n + 1]:g}", float(times[n + 1]))
    extra = rec if rec is not None else (None if extra_drift is None else np.asarray(extra_drift))
    return Trajectory(times - times[0], out, noise, extra)


def write_trajectory_csv(path, traj, replica=0):
    from .noise import write_path_csv

    write_path_csv(path, traj.times, traj.values[replica], prefix="x")


# ---------------------------------------------------------------------------
# diagnostics and warm starts
# ---------------------------------------------------------------------------


def default_burn_in(kernel):
    return 50.0 if kernel.hurst <= 0.7 else 100.0


def _noise_for(kernel, T, step, seed, replicas, d, tol=1e-4):
    w = sample_wiener(required_past(kernel, T, tol), T, step, seed, replicas, d)
    return synthesize_noise(kernel, w, tol=tol)


@dataclass
class OUReport:
    c_fit: float
    safety: float
    violations: int
    n_validation: int
    growth_c: float
    ou_second_moment: np.ndarray
    times: np.ndarray

    def to_dict(self):
        m = self.ou_second_moment
        half = m[m.size // 2 :]
        return {"c_fit": self.c_fit, "safety": self.safety, "violations": self.violations,
                "n_validation": self.n_validation, "growth_c": self.growth_c,
                "ou_sup_second_moment": float(m.max()),
                "ou_late_relative_spread": float((half.max() - half.min()) / max(half.mean(), 1e-300))}


def _ou_ratio(drift, kernel, sigma, x0, T, step, seed, replicas):
    noise = _noise_for(kernel, T, step, seed, replicas, drift.d)
    x = integrate(drift, sigma, x0, noise).values
    y = integrate(make_linear_drift(1.0, drift.d), sigma, x0, noise).values
    h = np.diff(noise.grid)
    a = drift.kappa
    q = 1.0 + np.sum(y * y, axis=-1) ** drift.growth_N
    F = np.zeros(q.shape)
    decay = np.exp(-0.5 * a * h)
    for n in range(h.size):
        F[:, n + 1] = decay[n] * F[:, n] + 0.5 * h[n] * (decay[n] * q[:, n] + q[:, n + 1])
    gap = np.sum((x - y) ** 2, axis=-1)
    ratio = np.max(gap[:, 1:] / F[:, 1:], axis=1)
    # linear-growth constant of the OU path: |y| <= (|x0| + sup|sigma G|) e^{C T}
    sg = np.max(np.linalg.norm(noise.values * as_sigma(sigma, drift.d), axis=-1), axis=1)
    ymax = np.max(np.linalg.norm(y, axis=-1), axis=1)
    env = np.linalg.norm(np.atleast_1d(x0)) + sg
    growth = np.max(np.log(np.maximum(ymax / env, 1.0))) / T
    return ratio, growth, np.mean(np.sum(y * y, axis=-1), axis=0), noise.grid


def ou_comparison_probe(drift, kernel, x0, T=10.0, n=200, sigma=1.0, step=1e-2, seed=0, safety=2.0):
    """Compare the solution with the unit OU process driven by the same noise.

    A constant ``C`` is fitted as the largest observed ratio
    ``|x - y|^2 / int_0^t e^{a(s - t)/2} (1 + |y_s|^{2N}) ds`` on a first
    batch; an independent batch counts paths exceeding ``safety * C``.
    """
    r1, g1, m1, grid = _ou_ratio(drift, kernel, sigma, x0, T, step, seed, np.arange(n))
    r2, g2, m2, _ = _ou_ratio(drift, kernel, sigma, x0, T, step, seed, np.arange(n, 2 * n))
    c = float(r1.max())
    viol = int(np.count_nonzero(r2 > safety * c * (1 + 1e-12)))
    return OUReport(c, safety, viol, n, float(max(g1, g2)), 0.5 * (m1 + m2), grid)


@dataclass
class BurnIn:
    state: np.ndarray
    wiener: object
    noise: NoisePath
    moments: dict
    stable: bool


def burn_in_stationary(drift, sigma, kernel, T_burn=None, seed=0, n=1, step=1e-2, y_init=0.0,
                       replicas=None, check=True, orders=(2, 4)):
    """Run from ``y_init`` for ``T_burn`` and return the end state with its Wiener record.

    With ``check=True`` the run continues to ``2 T_burn`` on the same Wiener
    path and the moments ``E|X|^p`` at both times are compared; a relative
    drift above 5% triggers a warning carrying both estimates.
    """
    T_burn = default_burn_in(kernel) if T_burn is None else float(T_burn)
    reps = np.arange(n) if replicas is None else np.asarray(replicas)
    T_run = 2 * T_burn if check else T_burn
    noise = _noise_for(kernel, T_run, step, seed, reps, drift.d)
    traj = integrate(drift, sigma, np.full(drift.d, y_init), noise)
    i1 = int(round(T_burn / step))
    x1 = traj.values[:, i1]
    moments = {}
    stable = True
    for p in orders:
        a1 = np.linalg.norm(x1, axis=-1) ** p
        m1 = float(a1.mean())
        moments[f"m{p}_T"] = m1
        if check and reps.size > 1:
            a2 = np.linalg.norm(traj.values[:, -1], axis=-1) ** p
            m2 = float(a2.mean())
            moments[f"m{p}_2T"] = m2
            # relative drift above 5% that sampling error cannot explain
            se = math.sqrt((a1.var() + a2.var()) / reps.size)
            if abs(m2 - m1) > 0.05 * max(abs(m1), abs(m2)) + 3.0 * se:
                stable = False
    if check and not stable:
        warnings.warn(f"moments not stabilised between T_burn and 2 T_burn: {moments}", RuntimeWarning)
    w = noise.wiener.truncate(T_burn) if check else noise.wiener
    return BurnIn(x1, w, noise, moments, stable)
