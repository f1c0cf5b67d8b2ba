"""
Distances between laws and sub-exponential rate fits.

The synchronous coupling gives the upper bound

    W_2(law X_t, law Y_t)^2 <= E |X_t - Y_t|^2,

so the mean-square gap of a coupled pair, with ``Y`` started in the
stationary regime, is the decay curve the fits below are run on.  Decay is
modelled as ``log d(t) = a - t^gamma / c`` with ``gamma`` in ``(0, 1]``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, stats

from .coupling import synchronous_couple
from .noise import CHUNK, replica_generator, wilson_interval

__all__ = [
    "MetricsError",
    "DecayCurve",
    "RateFit",
    "TVEstimate",
    "decay_curve",
    "fit_window",
    "fit_subexponential",
    "fit_exponential_rate",
    "bootstrap_rate",
    "gamma_exponent",
    "wasserstein2_1d",
    "tv_from_coupling",
    "write_decay_csv",
    "write_rates_json",
]


class MetricsError(ValueError):
    pass


@dataclass
class DecayCurve:
    times: np.ndarray
    values: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n: int
    meta: dict = field(default_factory=dict)
    samples: Optional[np.ndarray] = field(default=None, repr=False)  # (n, n_times) squared gaps

    def rows(self):
        return [(float(t), float(v), float(lo), float(hi), self.n)
                for t, v, lo, hi in zip(self.times, self.values, self.ci_low, self.ci_high)]


@dataclass
class RateFit:
    gamma_hat: float
    c_hat: float
    log_amplitude: float
    r2: float
    window: tuple
    ci: Optional[tuple] = None

    def to_dict(self):
        out = {"gamma_hat": self.gamma_hat, "c_hat": self.c_hat, "log_amplitude": self.log_amplitude,
               "r2": self.r2, "window": list(self.window)}
        if self.ci is not None:
            out["gamma_ci"] = list(self.ci)
        return out


@dataclass
class TVEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    n: int

    def to_dict(self):
        return {"estimate": self.estimate, "ci": [self.ci_low, self.ci_high], "n": self.n}


# ---------------------------------------------------------------------------
# decay curves
# ---------------------------------------------------------------------------


def _batches(n, threads):
    # chunk-aligned so a batch never splits a generator call
    size = CHUNK * max(1, math.ceil(n / (CHUNK * max(1, threads))))
    return [np.arange(a, min(n, a + size)) for a in range(0, n, size)]


def _mean_ci(samples, n_boot, seed, level=0.95):
    mean = samples.mean(axis=0)
    if n_boot <= 0 or samples.shape[0] < 2:
        return mean, mean.copy(), mean.copy()
    rng = replica_generator(seed, 0, 7)
    res = stats.bootstrap((samples,), np.mean, axis=0, n_resamples=n_boot, method="percentile",
                          confidence_level=level, random_state=rng, vectorized=True)
    lo, hi = res.confidence_interval
    return mean, np.minimum(lo, mean), np.maximum(hi, mean)


def decay_curve(drift, sigma, kernel, x0_law, t_grid, n=500, seed=0, step=1e-2, T_burn=None, n_boot=500,
                threads=1):
    """Mean-square gap ``E|X_t - Y_t|^2`` on ``t_grid`` with bootstrap CIs.

    ``Y`` is a stationary warm start sharing the Wiener past with ``X``.
    ``x0_law`` is a point, an ``(n, d)`` array of starting points, or
    ``"stationary"``.  Replicas are split into batches run on ``threads``
    workers; results do not depend on the split.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if n < 1:
        raise MetricsError("n must be positive")
    if np.any(t_grid < 0):
        raise MetricsError("t_grid must be nonnegative")
    T = float(t_grid.max())
    idx = np.rint(t_grid / step).astype(int)
    if not np.allclose(idx * step, t_grid, atol=1e-9):
        raise MetricsError("t_grid must lie on the step grid")
    x0 = x0_law
    if not isinstance(x0_law, str):
        x0 = np.asarray(x0_law, dtype=float)
        if x0.ndim == 2 and x0.shape[0] != n:
            raise MetricsError("x0_law array needs one row per replica")

    def work(reps):
        start = x0 if (isinstance(x0, str) or x0.ndim < 2) else x0[reps]
        ct = synchronous_couple(drift, sigma, start, "stationary", kernel, T, seed=seed, n=reps.size,
                                step=step, T_burn=T_burn, replicas=reps)
        return ct.gap[:, idx] ** 2

    batches = _batches(n, threads)
    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, batches))
    else:
        parts = [work(b) for b in batches]
    sq = np.concatenate(parts, axis=0)
    mean, lo, hi = _mean_ci(sq, n_boot, seed)
    meta = {"drift": drift.to_dict(), "kernel": kernel.to_dict(), "seed": int(seed), "step": step,
            "x0": x0_law if isinstance(x0_law, str) else np.asarray(x0_law).tolist()}
    return DecayCurve(t_grid, mean, lo, hi, int(n), meta, sq)


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------


def fit_window(curve, t_min=2.0, n_ci=3.0):
    """Boolean mask of usable points: ``t >= t_min`` and clear of the Monte Carlo floor.

    A point is at the floor when its value is within ``n_ci`` CI
    half-widths of zero.  The window stops at the first such point.
    """
    t, v = curve.times, curve.values
    half = np.maximum(curve.values - curve.ci_low, curve.ci_high - curve.values)
    ok = (v > n_ci * half) & (v > 0) & np.isfinite(v)
    mask = t >= t_min
    after = np.nonzero(mask & ~ok)[0]
    if after.size:
        mask &= np.arange(t.size) < after[0]
    return mask


def _unpack(curve):
    if isinstance(curve, DecayCurve):
        return np.asarray(curve.times, float), np.asarray(curve.values, float)
    t, v = curve
    return np.asarray(t, float), np.asarray(v, float)


def _profile(t, y, gamma):
    """Best ``(a, slope, sse)`` for ``y = a + slope t^gamma`` at fixed ``gamma``."""
    x = t**gamma
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ coef
    return coef[0], coef[1], float(r @ r)


def fit_subexponential(curve, window=None, t_min=2.0, gamma_grid=None):
    """Fit ``log d(t) = a - t^gamma / c`` by nonlinear least squares.

    ``curve`` is a :class:`DecayCurve` or a pair ``(t, values)``.  ``window``
    is ``(t_lo, t_hi)``, a boolean mask, or ``None`` (``t >= t_min`` and,
    for a :class:`DecayCurve`, clear of the Monte Carlo floor).  ``gamma``
    is seeded by a grid search over the profile likelihood.
    """
    t, v = _unpack(curve)
    if window is None:
        mask = fit_window(curve, t_min) if isinstance(curve, DecayCurve) else t >= t_min
    elif isinstance(window, tuple):
        mask = (t >= window[0]) & (t <= window[1])
    else:
        mask = np.asarray(window, bool)
    t, v = t[mask], v[mask]
    if t.size < 4:
        raise MetricsError(f"need at least 4 points in the fit window, got {t.size}")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise MetricsError("non-positive values in the fit window; shrink the window before the floor")
    y = np.log(v)
    grid = np.linspace(0.02, 1.0, 99) if gamma_grid is None else np.asarray(gamma_grid)
    best = None
    for g in grid:
        a, s, sse = _profile(t, y, g)
        if s < 0 and (best is None or sse < best[3]):
            best = (g, a, s, sse)
    if best is None:
        raise MetricsError("curve is not decreasing on the fit window")
    g0, a0, s0, _ = best

    def resid(p):
        a, logc, g = p
        return a - t**g * math.exp(-logc) - y

    sol = optimize.least_squares(resid, [a0, -math.log(-s0), g0],
                                 bounds=([-np.inf, -np.inf, 1e-3], [np.inf, np.inf, 1.0]),
                                 x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    a, logc, g = sol.x
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(sol.fun @ sol.fun) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(g), float(math.exp(logc)), float(a), r2, (float(t[0]), float(t[-1])))


def fit_exponential_rate(t, values, window=None):
    """``(rate, r2)`` from a log-linear fit of ``values ~ exp(-rate t)``."""
    t = np.asarray(t, float)
    v = np.asarray(values, float)
    if window is not None:
        m = (t >= window[0]) & (t <= window[1])
        t, v = t[m], v[m]
    if np.any(v <= 0):
        raise MetricsError("non-positive values in the fit window")
    y = np.log(v)
    res = stats.linregress(t, y)
    return float(-res.slope), float(res.rvalue**2)


def bootstrap_rate(curve, n_boot=200, seed=0, level=0.95, window=None):
    """Fit plus a percentile CI for ``gamma`` from resampling replicas."""
    if curve.samples is None:
        raise MetricsError("bootstrap needs the per-replica samples")
    mask = fit_window(curve) if window is None else window
    fit = fit_subexponential(curve, mask)
    rng = replica_generator(seed, 0, 8)
    n = curve.samples.shape[0]
    t = curve.times
    gammas = []
    for _ in range(n_boot):
        vals = curve.samples[rng.integers(0, n, n)].mean(axis=0)
        try:
            gammas.append(fit_subexponential((t, vals), mask).gamma_hat)
        except MetricsError:
            continue
    if gammas:
        q = np.quantile(gammas, [0.5 - level / 2, 0.5 + level / 2])
        fit.ci = (float(min(q[0], fit.gamma_hat)), float(max(q[1], fit.gamma_hat)))
    return fit


def gamma_exponent(alpha, epsilon, upsilon=math.inf):
    """``2 a / (1 + 1/upsilon + 2 a)`` with ``a = alpha + 1/2 - epsilon``.

    ``epsilon = 0`` is accepted as the limiting value.
    """
    a = alpha + 0.5 - epsilon
    if epsilon < 0 or a <= 0:
        raise MetricsError(f"epsilon must lie in (0, {alpha + 0.5:g}), got {epsilon}")
    if upsilon <= 0:
        raise MetricsError("upsilon must be positive")
    return 2 * a / (1 + 1 / upsilon + 2 * a)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def _w2_sorted(a, b):
    if a.size == b.size:
        return math.sqrt(float(np.mean((np.sort(a) - np.sort(b)) ** 2)))
    m = max(a.size, b.size)
    q = (np.arange(m) + 0.5) / m
    return math.sqrt(float(np.mean((np.quantile(a, q) - np.quantile(b, q)) ** 2)))


def wasserstein2_1d(sample_a, sample_b):
    """Empirical ``W_2`` by sorted pairing; unequal sizes use quantile interpolation.

    ``(n, d)`` samples give the per-component values.
    """
    a = np.asarray(sample_a, float)
    b = np.asarray(sample_b, float)
    if a.size == 0 or b.size == 0:
        raise MetricsError("empty sample")
    if a.ndim <= 1 and b.ndim <= 1:
        return _w2_sorted(a.ravel(), b.ravel())
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    if a.shape[1] != b.shape[1]:
        raise MetricsError("samples have different dimensions")
    return np.array([_w2_sorted(a[:, j], b[:, j]) for j in range(a.shape[1])])


def tv_from_coupling(success):
    """Coupling-failure frequency with a Wilson interval; bounds the TV distance."""
    s = np.asarray(success, bool).ravel()
    n = s.size
    fails = int(n - s.sum())
    lo, hi = wilson_interval(fails, n)
    return TVEstimate(fails / n if n else 0.0, lo, hi, n)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def write_decay_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mean_sq_gap", "ci_low", "ci_high", "n"])
        for t, v, lo, hi, n in curve.rows():
            w.writerow([_fmt(t), _fmt(v), _fmt(lo), _fmt(hi), n])


def write_rates_json(path, fit, H=None, drift=None, extra=None):
    out = fit.to_dict()
    out["H"] = H
    out["drift"] = drift
    if extra:
        out.update(extra)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
