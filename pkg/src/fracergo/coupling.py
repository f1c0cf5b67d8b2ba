"""
Synchronous coupling, stopping-time schedules and contraction probes.

Two solutions driven by the same noise can only get closer when the drift
is monotone.  Contraction happens once the pair leaves the ball where the
drift is flat.  The schedule ``tau_0 < tau_1 < ...`` gives the times at which
the memory of the noise is provably small.  Its waiting times are

    Delta_k = max(1, (C1/alpha_eps * S_k)^(1/alpha_eps)),
    tau_k = 1 + tau_{k-1} + Delta_k,

where ``S_k`` is the weighted Hölder norm of the Wiener past seen from
``1 + tau_{k-1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import (
    Trajectory,
    as_sigma,
    default_burn_in,
    integrate,
    verify_c1,
)
from .noise import (
    NoisePath,
    _fine_weights,
    edge_index,
    increment_rows,
    innovation_paths,
    required_past,
    sample_wiener,
    shift_weights,
    synthesize_noise,
)

__all__ = [
    "ScheduleError",
    "CoupledTrajectory",
    "StoppingSchedule",
    "MemoryReport",
    "ContractionReport",
    "StepwiseReport",
    "default_epsilon",
    "waiting_time",
    "synchronous_couple",
    "coupled_noise",
    "build_stopping_schedule",
    "check_memory_condition",
    "tail_bound_check",
    "contraction_probe",
    "stepwise_decay_probe",
]


class ScheduleError(ValueError):
    pass


@dataclass
class CoupledTrajectory:
    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    noise: Optional[NoisePath] = None

    @property
    def gap(self):
        return np.linalg.norm(self.X - self.Y, axis=-1)


def coupled_noise(kernel, T, step, seed, replicas, d, tol=1e-4, min_past=0.0):
    w = sample_wiener(max(required_past(kernel, T, tol), min_past), T, step, seed, replicas, d)
    return synthesize_noise(kernel, w, tol=tol)


def synchronous_couple(drift, sigma, x0, y0, kernel, T, seed=0, n=1, step=1e-3, T_burn=None,
                       replicas=None, noise=None):
    """Integrate ``X`` from ``x0`` and ``Y`` from ``y0`` against the same noise.

    ``y0="stationary"`` draws ``Y`` by a warm start: ``Y`` runs from the
    origin for ``T_burn`` on the same Wiener path before ``X`` is released,
    so both legs share the full noise past.  Times are reported relative to
    the release of ``X``.
    """
    reps = np.arange(n) if replicas is None else np.asarray(replicas)
    stationary = isinstance(y0, str)
    if stationary and y0 != "stationary":
        raise ValueError(f"y0 must be a point or 'stationary', got {y0!r}")
    tb = (default_burn_in(kernel) if T_burn is None else float(T_burn)) if stationary else 0.0
    if noise is None:
        noise = coupled_noise(kernel, tb + T, step, seed, reps, drift.d)
    i0 = int(round(tb / step))
    if stationary:
        ytraj = integrate(drift, sigma, np.zeros(drift.d), noise)
        Y = ytraj.values[:, i0:]
    else:
        Y = integrate(drift, sigma, y0, noise, start=i0).values
    if isinstance(x0, str):
        X = Y.copy()
    else:
        X = integrate(drift, sigma, x0, noise, start=i0).values
    return CoupledTrajectory(noise.grid[i0:] - noise.grid[i0], X, Y, noise)


# ---------------------------------------------------------------------------
# stopping schedule
# ---------------------------------------------------------------------------


def default_epsilon(kernel):
    return min(0.05, (kernel.alpha + 0.5) / 4.0)


def waiting_time(c1_alpha, s_value, alpha_eps, step=None):
    """``max(1, (c1_alpha * S)^(1/alpha_eps))``, rounded up to the grid when ``step`` is given."""
    raw = np.maximum(1.0, (c1_alpha * np.asarray(s_value, dtype=float)) ** (1.0 / alpha_eps))
    if step is None:
        return raw
    return np.ceil(raw / step - 1e-9) * step


@dataclass
class StoppingSchedule:
    epsilon: float
    alpha_eps: float
    c1_alpha: float
    taus: np.ndarray  # (n_rep, k_max + 1), taus[:, 0] = 0
    deltas: np.ndarray  # (n_rep, k_max + 1), deltas[:, 0] = nan
    s_values: np.ndarray
    s_truncation: np.ndarray
    memory_sup: Optional[np.ndarray] = None
    recent_sup: Optional[np.ndarray] = None
    d1_sup: Optional[np.ndarray] = None
    dr_sup: Optional[np.ndarray] = None
    K: Optional[float] = None
    eta: Optional[float] = None
    wiener: object = None

    @property
    def k_max(self):
        return self.taus.shape[1] - 1

    @property
    def recent_ok(self):
        return None if self.recent_sup is None else self.recent_sup <= self.K

    def rows(self):
        """Rows ``(replica, k, tau, delta, s_value, memory_sup, recent_ok)``, ``k >= 1``."""
        out = []
        for r in range(self.taus.shape[0]):
            for k in range(1, self.k_max + 1):
                ms = float("nan") if self.memory_sup is None else float(self.memory_sup[r, k])
                ok = "" if self.recent_sup is None else int(self.recent_sup[r, k] <= self.K)
                out.append((int(self.wiener.replicas[r]), k, float(self.taus[r, k]), float(self.deltas[r, k]),
                            float(self.s_values[r, k]), ms, ok))
        return out


def _s_statistic(values, edges, anchor_idx, beta):
    """Weighted sup of the past seen from ``edges[anchor_idx]``, per replica."""
    n_rep = values.shape[0]
    out = np.empty(n_rep)
    for r in range(n_rep):
        a = anchor_idx[r]
        past = values[r, :a] - values[r, a]
        s = edges[a] - edges[:a]
        out[r] = np.max(np.linalg.norm(past, axis=-1) / (1.0 + s) ** beta) if a else 0.0
    return out


def build_stopping_schedule(kernel, wiener, epsilon=None, k_max=6, memory=True, K=None, t_points=None):
    """Build the schedule for every replica of ``wiener`` (extended lazily).

    With ``memory=True`` the remote-past sup
    ``sup_[0,1] |D^{Delta_k}(1 + tau_{k-1})|`` and the two recent-past parts
    (``[1 + tau_{k-1}, tau_k - 1]`` and ``[tau_k - 1, tau_k]``) are evaluated
    on ``t_points`` (default: every grid point of ``[0, 1]``).
    """
    eps = default_epsilon(kernel) if epsilon is None else float(epsilon)
    if not (0.0 < eps < kernel.alpha + 0.5):
        raise ScheduleError(f"epsilon must lie in (0, {kernel.alpha + 0.5:g}), got {eps}")
    a_eps = kernel.alpha + 0.5 - eps
    c1a = kernel.c1 / a_eps
    beta = 0.5 + eps
    h = wiener.step
    n_rep = wiener.n_replicas
    taus = np.zeros((n_rep, k_max + 1))
    deltas = np.full((n_rep, k_max + 1), np.nan)
    svals = np.full((n_rep, k_max + 1), np.nan)
    strunc = np.full((n_rep, k_max + 1), np.nan)
    for k in range(1, k_max + 1):
        anchor = 1.0 + taus[:, k - 1]
        if anchor.max() + 1.0 > wiener.horizon:
            wiener = wiener.extend(anchor.max() + 1.0)
        edges = wiener.edges
        vals = wiener.values()
        a_idx = np.array([edge_index(wiener, a, "anchor") for a in anchor])
        S = _s_statistic(vals, edges, a_idx, beta)
        svals[:, k] = S
        span = anchor - edges[0]
        strunc[:, k] = 3.0 * np.sqrt(span) / (1.0 + span) ** beta
        deltas[:, k] = waiting_time(c1a, S, a_eps, h)
        taus[:, k] = anchor + deltas[:, k]
    end = taus[:, -1].max() + 1.0
    if end > wiener.horizon:
        wiener = wiener.extend(end)
    sched = StoppingSchedule(eps, a_eps, c1a, taus, deltas, svals, strunc, wiener=wiener)
    if memory:
        _memory_sups(kernel, sched, t_points)
        if K is None:
            K = 2.0 * (np.median(sched.d1_sup[:, 1:]) + np.median(sched.dr_sup[:, 1:]))
        sched.K = float(K)
        sched.eta = float(np.mean(sched.recent_sup[:, 1:] <= sched.K))
    return sched


def _memory_sups(kernel, sched, t_points=None):
    w = sched.wiener
    h = w.step
    t = h * np.arange(int(round(1.0 / h)) + 1) if t_points is None else np.asarray(t_points)
    n_rep, K1 = sched.taus.shape
    mem = np.full((n_rep, K1), np.nan)
    d1 = np.full((n_rep, K1), np.nan)
    dr = np.full((n_rep, K1), np.nan)
    rec = np.full((n_rep, K1), np.nan)
    table = _fine_weights(kernel, h, w.n_near + w.n_future + t.size + 2)
    inc = w.increments
    for r in range(n_rep):
        for k in range(1, K1):
            tau = sched.taus[r, k]
            i_a = edge_index(w, 1.0 + sched.taus[r, k - 1])
            i_m = edge_index(w, tau - 1.0)
            i_t = edge_index(w, tau)
            A = shift_weights(kernel, w, 0, i_t, tau, t, table)
            x = inc[r, :i_t]
            remote = A[:, :i_a] @ x[:i_a]
            p1 = A[:, i_a:i_m] @ x[i_a:i_m]
            p2 = A[:, i_m:] @ x[i_m:]
            mem[r, k] = np.linalg.norm(remote, axis=-1).max()
            d1[r, k] = np.linalg.norm(p1, axis=-1).max()
            dr[r, k] = np.linalg.norm(p2, axis=-1).max()
            rec[r, k] = np.linalg.norm(p1 + p2, axis=-1).max()
    sched.memory_sup, sched.d1_sup, sched.dr_sup, sched.recent_sup = mem, d1, dr, rec


@dataclass
class MemoryReport:
    remote_max: float
    remote_fraction_ok: float
    slack: float
    K: float
    eta_hat: float
    per_k_remote_max: list
    per_k_eta: list

    def to_dict(self):
        return dict(self.__dict__)


def check_memory_condition(schedule, kernel=None, wiener=None, K=None, slack=0.0):
    """Summarise the remote-past bound (``<= 1 + slack``) and the recent-past success rate at ``K``."""
    if schedule.memory_sup is None:
        if kernel is None:
            raise ScheduleError("schedule has no memory sups; pass the kernel to compute them")
        _memory_sups(kernel, schedule)
    K = schedule.K if K is None else float(K)
    if K is None:
        K = 2.0 * (np.median(schedule.d1_sup[:, 1:]) + np.median(schedule.dr_sup[:, 1:]))
    mem = schedule.memory_sup[:, 1:]
    ok = schedule.recent_sup[:, 1:] <= K
    return MemoryReport(
        float(mem.max()), float(np.mean(mem <= 1.0 + slack)), slack, float(K), float(ok.mean()),
        [float(v) for v in mem.max(axis=0)], [float(v) for v in ok.mean(axis=0)],
    )


def tail_bound_check(schedule, p, t_grid=None):
    """Empirical ``P(tau_k >= t)`` against ``M_p (k+1)^p t^-p`` with ``M_p`` estimated.

    ``M_p`` is the sample mean of ``(2 + (C1/alpha_eps * S)^(1/alpha_eps))^p`` over all
    ``(replica, k)`` cells.  Returns ``(holds, worst_ratio, M_p)``; the ratio is
    empirical over bound, maximised over ``k`` and ``t``.
    """
    S = schedule.s_values[:, 1:]
    M = float(np.mean((2.0 + (schedule.c1_alpha * S) ** (1.0 / schedule.alpha_eps)) ** p))
    taus = schedule.taus
    t_grid = np.geomspace(1.0, max(2.0, 4 * taus.max()), 60) if t_grid is None else np.asarray(t_grid)
    worst = 0.0
    for k in range(1, taus.shape[1]):
        emp = np.mean(taus[:, k][:, None] >= t_grid[None, :], axis=0)
        bound = M * (k + 1) ** p * t_grid ** (-float(p))
        worst = max(worst, float(np.max(emp / bound)))
    return worst <= 1.0, worst, M


# ---------------------------------------------------------------------------
# contraction probes
# ---------------------------------------------------------------------------


@dataclass
class ContractionReport:
    eta_hat: float
    delta_hat: float
    rho_hat: float
    rho_structural: float
    rbar: float
    kbar: float
    worst: tuple
    ratios: np.ndarray = field(repr=False)

    @property
    def passed(self):
        return self.rho_hat < 1.0

    def to_dict(self):
        return {"eta_hat": self.eta_hat, "delta_hat": self.delta_hat, "rho_hat": self.rho_hat,
                "rho_structural": self.rho_structural, "rbar": self.rbar, "kbar": self.kbar,
                "worst": None if self.worst is None else list(self.worst),
                "passed": self.passed}


def _longest_run(mask, h):
    """Longest run of True along the time axis, in time units."""
    best = np.zeros(mask.shape[:-1])
    cur = np.zeros(mask.shape[:-1])
    for i in range(mask.shape[-1]):
        cur = np.where(mask[..., i], cur + 1, 0)
        best = np.maximum(best, cur)
    return np.maximum(best - 1, 0) * h


def _perturbation_family(kernel, K, t, n_remote, seed, d):
    """Deterministic perturbations ``d`` with ``sup |d| <= K`` on the grid ``t``."""
    e1 = np.zeros(d)
    e1[0] = 1.0
    fam = [("zero", np.zeros((t.size, d))),
           ("plus_K", np.outer(np.ones_like(t), K * e1)),
           ("minus_K", np.outer(np.ones_like(t), -K * e1)),
           ("ramp", np.outer(K * t, e1)),
           ("sine", np.outer(K * np.sin(2 * np.pi * t), e1))]
    if n_remote:
        h = t[1] - t[0]
        w = sample_wiener(max(required_past(kernel, 3.0), 3.0), 3.0, h, seed, np.arange(10**6, 10**6 + n_remote), d)
        tau = 2.0
        A = shift_weights(kernel, w, 0, edge_index(w, 1.0), tau, t)
        rem = np.einsum("ic,rcd->rid", A, increment_rows(w, None, 0, edge_index(w, 1.0)))
        for j in range(n_remote):
            m = np.abs(rem[j]).max()
            scale = min(1.0, K / m) if m > 0 else 1.0
            fam.append((f"remote_{j}", rem[j] * scale))
    return fam


def contraction_probe(drift, sigma, kernel, K=3.0, p=2, n=500, points=None, step=1e-2, seed=0,
                      n_remote=4, delta_grid=None):
    """Falsification harness for one-period contraction under bounded perturbations.

    For every pair of starting points, every perturbation ``d`` of a finite
    family with ``sup |d| <= K`` and ``n`` innovation paths ``Z``,
    ``X^{x,d}_t = x + int b(X) + sigma (d_t + Z_t)``.  ``rho_hat`` is the
    largest ``E|X_1^{x,d} - X_1^{y,d}|^p / |x - y|^p``; ``eta_hat(delta)`` is the
    smallest (over ``x, d``) probability of an excursion of length at least
    ``delta`` outside ``B(0, rbar)``; ``delta_hat`` minimises the structural
    bound ``1 - eta + eta exp(-p kbar delta)``.
    """
    d = drift.d
    if drift.rbar is None:
        verify_c1(drift)
    if drift.rbar is None:
        raise ScheduleError("drift has no (rbar, kbar) certificate")
    rbar, kbar = drift.rbar, drift.kbar
    if points is None:
        base = np.array([-3.0, -1.5, -0.5, 0.5, 1.5, 3.0])
        points = np.zeros((base.size, d))
        points[:, 0] = base
    points = np.atleast_2d(np.asarray(points, dtype=float))
    w = sample_wiener(0.0, 1.0, step, seed, np.arange(n), d)
    Z = innovation_paths(kernel, w, 1.0)  # (n, n_t, d)
    t = step * np.arange(Z.shape[1])
    fam = _perturbation_family(kernel, K, t, n_remote, seed, d)
    s = as_sigma(sigma, d)
    P = points.shape[0]
    finals = np.empty((len(fam), P, n, d))
    runs = np.empty((len(fam), P, n))
    for fi, (_, dpath) in enumerate(fam):
        dn = np.diff(Z + dpath[None], axis=1)  # (n, n_steps, d)
        x = np.broadcast_to(points[:, None, :], (P, n, d)).copy()
        outside = np.empty((P, n, t.size), dtype=bool)
        outside[..., 0] = np.linalg.norm(x, axis=-1) >= rbar
        for i in range(dn.shape[1]):
            x = x + drift.b(x) * step + s * dn[None, :, i]
            outside[..., i + 1] = np.linalg.norm(x, axis=-1) >= rbar
        finals[fi] = x
        runs[fi] = _longest_run(outside, step)
    ratios = np.full((len(fam), P, P), np.nan)
    worst, rho = None, -np.inf
    for fi in range(len(fam)):
        for i in range(P):
            for j in range(i + 1, P):
                gap0 = np.linalg.norm(points[i] - points[j])
                val = np.mean(np.linalg.norm(finals[fi, i] - finals[fi, j], axis=-1) ** p) / gap0**p
                ratios[fi, i, j] = val
                if val > rho:
                    rho, worst = val, (fam[fi][0], points[i].tolist(), points[j].tolist())
    delta_grid = np.linspace(step, 1.0, 100) if delta_grid is None else np.asarray(delta_grid)
    eta = np.array([np.min(np.mean(runs >= dl - 1e-12, axis=-1)) for dl in delta_grid])
    struct = 1.0 - eta + eta * np.exp(-p * kbar * delta_grid)
    best = int(np.argmin(struct))
    return ContractionReport(float(eta[best]), float(delta_grid[best]), float(rho), float(struct[best]),
                             float(rbar), float(kbar), worst, ratios)


@dataclass
class StepwiseReport:
    moments: np.ndarray
    ratios: np.ndarray
    fitted_ratio: float
    times: np.ndarray
    schedule: StoppingSchedule = field(repr=False)

    def to_dict(self):
        return {"moments": self.moments.tolist(), "ratios": self.ratios.tolist(),
                "fitted_ratio": self.fitted_ratio, "mean_times": self.times.tolist()}


def stepwise_decay_probe(drift, sigma, kernel, epsilon=None, k_max=6, p=2, n=2000, x0=3.0, y0=-3.0,
                         step=1e-2, seed=0, min_past=0.0):
    """Moments ``m_k = E|X_{1+tau_k} - Y_{1+tau_k}|^p`` along per-replica schedules.

    Returns the sequence, successive ratios and the geometric ratio fitted
    by least squares on ``log m_k``.
    """
    d = drift.d
    reps = np.arange(n)
    T0 = 2.0 * (k_max + 2)
    past = max(required_past(kernel, 6.0 * T0), min_past)
    w = sample_wiener(past, T0, step, seed, reps, d)
    sched = build_stopping_schedule(kernel, w, epsilon, k_max, memory=False)
    w = sched.wiener
    noise = synthesize_noise(kernel, w, check_past=False)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (d,))
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (d,))
    X = integrate(drift, sigma, x0, noise).values
    Y = integrate(drift, sigma, y0, noise).values
    idx = np.rint((1.0 + sched.taus) / step).astype(int)
    gap = np.linalg.norm(X - Y, axis=-1)
    g = np.take_along_axis(gap, idx, axis=1)
    m = np.mean(g**p, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = m[1:] / m[:-1]
        if np.all(m > 0):
            slope = np.polyfit(np.arange(m.size), np.log(m), 1)[0]
            fitted = float(np.exp(slope))
        else:
            fitted = 0.0
    return StepwiseReport(m, ratios, fitted, np.mean(1.0 + sched.taus, axis=0), sched)
