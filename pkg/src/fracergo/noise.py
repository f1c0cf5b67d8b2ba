"""
Two-sided Wiener paths and the moving-average noise they drive.

Randomness is counter based: every Gaussian increment is addressed by
``(seed, replica, stream, block)`` through :class:`numpy.random.SeedSequence`
spawn keys feeding a Philox generator.  A replica therefore sees the same
increments whatever batch it is simulated in, and a path extended later in
time agrees with one sampled long from the start.

Time layout of a :class:`WienerRecord` (``h`` is the step)::

    -T_past ........ -T_near ......... 0 ......... T
     geometric cells   uniform cells      uniform cells
     ("far")           ("near")           ("future")

The noise is the exact stochastic integral of the piecewise-constant cell
average of the kernel, i.e. the ``L^2`` projection of the integrand onto the
cell partition.  Cell averages come from antiderivative differences, so the
``u -> 0-`` singularity is integrated exactly (product integration).
"""

from __future__ import annotations

import hashlib
import math
import os
import warnings
import zlib
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import fft as sfft
from scipy import linalg, stats

from .kernels import KernelSpec, fractional_variance_constant, increment_variance

__all__ = [
    "NoiseError",
    "InsufficientPastError",
    "CHUNK",
    "derive_seed",
    "replica_generator",
    "standard_normals",
    "WienerRecord",
    "NoisePath",
    "NoiseDecomposition",
    "SmallBallEstimate",
    "sample_wiener",
    "required_past",
    "synthesize_noise",
    "noise_weights",
    "component_path",
    "shift_weights",
    "increment_rows",
    "edge_index",
    "decompose_noise",
    "innovation_paths",
    "exact_fbm_oracle",
    "fbm_covariance",
    "weighted_holder_norm",
    "small_ball_estimate",
    "brownian_small_ball",
    "wilson_interval",
    "write_path_csv",
    "save_wiener",
    "load_wiener",
]

#: replicas sharing one generator call; fixed so that layouts never change draws
CHUNK = 256

_FUTURE, _NEAR, _FAR, _AUX = 0, 1, 2, 3

#: default length of the uniformly resolved part of the past
NEAR_PAST = 2.0
#: growth ratio of far-past cell widths
FAR_RATIO = 1.05


class NoiseError(ValueError):
    pass


class InsufficientPastError(NoiseError):
    """The Wiener past is too short; ``minimal_past`` is the admissible horizon."""

    def __init__(self, message, minimal_past):
        super().__init__(message)
        self.minimal_past = minimal_past


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------


def derive_seed(master_seed, *labels):
    """Deterministic 63-bit seed from a master seed and string/int labels."""
    words = [int(master_seed) & 0xFFFFFFFFFFFFFFFF]
    for lab in labels:
        words.append(zlib.crc32(lab.encode()) if isinstance(lab, str) else int(lab))
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def replica_generator(seed, *key):
    """Philox generator addressed by ``seed`` and an integer key tuple."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def standard_normals(seed, replicas, stream, block, shape):
    """Standard normals of ``shape`` for each replica, layout independent.

    Replica ``r`` reads row ``r % CHUNK`` of the chunk ``r // CHUNK`` draw,
    so asking for a subset or a superset of replicas never changes a row.
    """
    replicas = np.asarray(replicas, dtype=np.int64)
    out = np.empty((replicas.size,) + tuple(shape))
    chunks = replicas // CHUNK
    for c in np.unique(chunks):
        rows = np.nonzero(chunks == c)[0]
        z = replica_generator(seed, c, stream, block).standard_normal((CHUNK,) + tuple(shape))
        out[rows] = z[replicas[rows] % CHUNK]
    return out


def wilson_interval(hits, n, level=0.95):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        return 0.0, 1.0
    z = stats.norm.ppf(0.5 + level / 2.0)
    p = hits / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


# ---------------------------------------------------------------------------
# Wiener record
# ---------------------------------------------------------------------------


def _far_edges(t_near, t_past, h, ratio=FAR_RATIO):
    """Ascending geometric cell edges covering ``[-t_past, -t_near]``."""
    if t_past <= t_near + 1e-12:
        return np.array([-t_near])
    edges = [t_near]
    while edges[-1] < t_past:
        e = edges[-1]
        edges.append(e + max(h, (ratio - 1.0) * e))
    edges[-1] = t_past
    if len(edges) > 2 and edges[-1] - edges[-2] < 0.5 * (edges[-2] - edges[-3]):
        del edges[-2]
    return -np.asarray(edges[::-1])


@dataclass(frozen=True)
class WienerRecord:
    """A batch of two-sided Wiener paths on a common cell partition.

    Increments have shape ``(n_replicas, n_cells, d)``; each has variance
    equal to its cell length.
    """

    seed: int
    replicas: np.ndarray
    d: int
    step: float
    far_edges: np.ndarray
    far_incr: np.ndarray
    near_incr: np.ndarray
    fut_incr: np.ndarray

    @property
    def n_replicas(self):
        return int(self.replicas.size)

    @property
    def n_near(self):
        return self.near_incr.shape[1]

    @property
    def n_future(self):
        return self.fut_incr.shape[1]

    @property
    def t_near(self):
        return self.n_near * self.step

    @property
    def t_past(self):
        return float(-self.far_edges[0]) if self.far_edges.size > 1 else self.t_near

    @property
    def horizon(self):
        return self.n_future * self.step

    @property
    def past_grid(self):
        near = -self.step * np.arange(self.n_near, -1, -1)
        return np.concatenate([self.far_edges[:-1], near]) if self.far_edges.size > 1 else near

    @property
    def future_grid(self):
        return self.step * np.arange(self.n_future + 1)

    @property
    def edges(self):
        """All cell edges, ascending, from ``-T_past`` to ``T``."""
        return np.concatenate([self.past_grid, self.future_grid[1:]])

    @property
    def increments(self):
        return np.concatenate([self.far_incr, self.near_incr, self.fut_incr], axis=1)

    @property
    def n_far(self):
        return self.far_incr.shape[1]

    def values(self):
        """``W`` at every edge, normalised by ``W(0) = 0``."""
        inc = self.increments
        w = np.concatenate([np.zeros((self.n_replicas, 1, self.d)), np.cumsum(inc, axis=1)], axis=1)
        zero = self.n_far + self.n_near
        return w - w[:, zero : zero + 1]

    def subset(self, rows):
        rows = np.asarray(rows)
        return replace(
            self,
            replicas=self.replicas[rows],
            far_incr=self.far_incr[rows],
            near_incr=self.near_incr[rows],
            fut_incr=self.fut_incr[rows],
        )

    def extend(self, T):
        """Return a record covering ``[0, T]``; existing increments are kept."""
        n_new = _n_steps(T, self.step)
        if n_new <= self.n_future:
            return self
        fut = _future_increments(self.seed, self.replicas, self.d, self.step, n_new)
        return replace(self, fut_incr=fut)

    def truncate(self, T):
        n = _n_steps(T, self.step)
        return replace(self, fut_incr=self.fut_incr[:, :n])

    def grid_hash(self):
        h = hashlib.sha256()
        for arr in (self.far_edges, np.array([self.step, self.n_near, self.n_future, self.d])):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()[:16]


def _n_steps(T, h):
    n = T / h
    r = round(n)
    return int(r) if abs(n - r) < 1e-7 * max(1.0, n) else int(math.ceil(n))


def _steps_per_block(h):
    return max(1, int(round(1.0 / h)))


def _block_increments(seed, replicas, d, h, stream, n_cells):
    m = _steps_per_block(h)
    n_blocks = -(-n_cells // m)
    parts = [standard_normals(seed, replicas, stream, b, (m, d)) for b in range(n_blocks)]
    if not parts:
        return np.zeros((len(replicas), 0, d))
    return np.concatenate(parts, axis=1)[:, :n_cells] * math.sqrt(h)


def _future_increments(seed, replicas, d, h, n):
    return _block_increments(seed, replicas, d, h, _FUTURE, n)


def sample_wiener(T_past, T, step, seed, replicas=1, d=1, near_past=NEAR_PAST):
    """Sample a batch of two-sided Wiener paths.

    Parameters
    ----------
    T_past, T : float
        Horizons of the past and future parts.
    step : float
        Uniform step on ``[-near_past, T]``.
    seed : int
    replicas : int or sequence of int
        Number of replicas (indices ``0..n-1``) or explicit replica indices.
    d : int
        Dimension.
    """
    step = float(step)
    if step <= 0:
        raise NoiseError("step must be positive")
    if T <= 0 or T_past < 0:
        raise NoiseError("need T > 0 and T_past >= 0")
    if step > T + 1e-12:
        raise NoiseError(f"step {step} exceeds horizon T={T}")
    reps = np.arange(replicas) if np.isscalar(replicas) else np.asarray(replicas, dtype=np.int64)
    n_fut = _n_steps(T, step)
    n_near = int(math.floor(min(float(T_past), near_past) / step + 1e-9))
    t_near = n_near * step
    far_edges = _far_edges(t_near, float(T_past), step)
    near = _block_increments(seed, reps, d, step, _NEAR, n_near)[:, ::-1]
    if far_edges.size > 1:
        widths = np.diff(far_edges)
        far = standard_normals(seed, reps, _FAR, 0, (widths.size, d)) * np.sqrt(widths)[None, :, None]
    else:
        far = np.zeros((reps.size, 0, d))
    fut = _future_increments(seed, reps, d, step, n_fut)
    return WienerRecord(int(seed), reps, int(d), step, far_edges, far, np.ascontiguousarray(near), fut)


def save_wiener(record, directory):
    """Store a record as ``.npz`` keyed by seed, replicas and grid hash."""
    os.makedirs(directory, exist_ok=True)
    key = f"w_{record.seed}_{record.replicas[0]}-{record.replicas[-1]}_{record.grid_hash()}.npz"
    path = os.path.join(directory, key)
    np.savez(path, seed=record.seed, replicas=record.replicas, d=record.d, step=record.step,
             far_edges=record.far_edges, far_incr=record.far_incr, near_incr=record.near_incr,
             fut_incr=record.fut_incr)
    return path


def load_wiener(path):
    z = np.load(path)
    return WienerRecord(int(z["seed"]), z["replicas"], int(z["d"]), float(z["step"]), z["far_edges"],
                        z["far_incr"], z["near_incr"], z["fut_incr"])


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _variance_at(kernel, T):
    if kernel.family_tag == "fractional":
        H = kernel.params["H"]
        return fractional_variance_constant(H) * T ** (2 * H)
    return increment_variance(kernel, T)


def required_past(kernel, T, tol=1e-4):
    """Smallest past horizon keeping the discarded variance below ``tol Var(G_T)``.

    Uses ``|g'(r)| <= C1/(alpha+1) (-r)^{-(alpha+1)}`` on ``r <= -1``, so the
    variance of the part of ``G_t`` driven by ``(-inf, -T_p]`` is at most
    ``t^2 C1^2 / ((alpha+1)^2 (2 alpha+1)) T_p^{-(2 alpha+1)}``.
    """
    a, c1 = kernel.alpha, kernel.c1
    if c1 == 0:
        return 0.0
    target = tol * _variance_at(kernel, T)
    k = (T * c1 / (a + 1.0)) ** 2 / (2 * a + 1.0)
    return max(1.0, (k / target) ** (1.0 / (2 * a + 1.0)))


def truncation_bound(kernel, T, t_past):
    a, c1 = kernel.alpha, kernel.c1
    if c1 == 0 or t_past <= 0:
        return 0.0 if c1 == 0 else math.inf
    tp = max(t_past, 1.0)
    return (T * c1 / (a + 1.0)) ** 2 / (2 * a + 1.0) * tp ** (-(2 * a + 1.0))


def _fine_weights(kernel, h, n):
    """``w[k]`` = average of ``g`` over ``[-(k+1)h, -kh]``, ``k = 0..n-1``."""
    k = np.arange(n, dtype=float)
    return kernel.cell_average(-(k + 1.0) * h, -k * h)


@dataclass(frozen=True)
class NoisePath:
    """Noise samples ``values[r, i, :] = G(grid[i])`` for each replica ``r``."""

    grid: np.ndarray
    values: np.ndarray
    wiener: WienerRecord
    past_truncation: tuple

    def increments(self):
        return np.diff(self.values, axis=1)


def _snap(times, h, what="time"):
    idx = np.rint(np.asarray(times, dtype=float) / h).astype(np.int64)
    if np.any(np.abs(idx * h - times) > 1e-9 * np.maximum(1.0, np.abs(times))):
        raise NoiseError(f"{what} must lie on the step-{h:g} grid")
    return idx


def noise_weights(kernel, wiener, grid):
    """Matrix ``A`` with ``G(grid) = A @ dW`` over all cells of ``wiener``.

    The covariance of the discretized noise is ``A diag(cell lengths) A^T``.
    """
    e = wiener.edges
    t = np.asarray(grid, dtype=float)[:, None]
    a, b = e[None, :-1], e[None, 1:]
    return kernel.cell_average(a, b, t) - kernel.cell_average(a, b, 0.0)


def synthesize_noise(kernel, wiener, grid=None, tol=1e-4, check_past=True):
    """Synthesize ``G`` on ``grid`` (default: every future grid point).

    Raises :class:`InsufficientPastError` when the Wiener past is shorter
    than :func:`required_past` at tolerance ``tol``.
    """
    h = wiener.step
    if grid is None:
        idx = np.arange(wiener.n_future + 1)
    else:
        idx = _snap(grid, h, "noise grid")
    if idx.size == 0:
        raise NoiseError("empty grid")
    if idx.min() < 0 or idx.max() > wiener.n_future:
        raise NoiseError("grid must lie within [0, T] of the Wiener record")
    T = idx.max() * h
    bound = truncation_bound(kernel, T, wiener.t_past)
    if check_past and T > 0:
        need = required_past(kernel, T, tol)
        if wiener.t_past + 1e-9 < need:
            raise InsufficientPastError(
                f"T_past={wiener.t_past:g} too short for tolerance {tol:g}; need T_past >= {need:.6g}", need
            )
    times = idx * h
    n_near, n_fut = wiener.n_near, wiener.n_future
    fine = np.concatenate([wiener.near_incr, wiener.fut_incr], axis=1)
    J = fine.shape[1]
    w = _fine_weights(kernel, h, J)
    if idx.size <= 64:
        # direct weights: column j of the fine region, output point i
        lag = idx[:, None] + n_near - 1 - np.arange(J)[None, :]
        lag0 = n_near - 1 - np.arange(J)
        A = np.where(lag >= 0, w[np.clip(lag, 0, J - 1)], 0.0) - np.where(lag0 >= 0, w[np.clip(lag0, 0, J - 1)], 0.0)
        vals = np.einsum("ij,rjd->rid", A, fine)
    else:
        conv = sfft.irfft(
            sfft.rfft(fine, n=_fft_len(2 * J), axis=1) * sfft.rfft(w, n=_fft_len(2 * J))[None, :, None],
            n=_fft_len(2 * J), axis=1,
        )[:, :J]
        pos = idx + n_near - 1
        vals = np.where((pos >= 0)[None, :, None], conv[:, np.clip(pos, 0, None)], 0.0)
        base = conv[:, n_near - 1] if n_near > 0 else np.zeros((wiener.n_replicas, wiener.d))
        vals = vals - base[:, None, :]
    if wiener.n_far:
        e = wiener.far_edges
        B = kernel.cell_average(e[None, :-1], e[None, 1:], times[:, None]) - kernel.cell_average(e[:-1], e[1:], 0.0)[None, :]
        vals = vals + np.einsum("ic,rcd->rid", B, wiener.far_incr)
    return NoisePath(times, vals, wiener, (wiener.t_past, bound))


def _fft_len(n):
    return sfft.next_fast_len(n, real=True)


# ---------------------------------------------------------------------------
# decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseDecomposition:
    """Remote, recent and innovation parts of ``G_{t+tau} - G_tau`` on ``t_grid``."""

    t_grid: np.ndarray
    remote: np.ndarray
    recent: np.ndarray
    innovation: np.ndarray
    theta: float
    tau: float

    @property
    def delta(self):
        return self.tau - self.theta

    def total(self):
        return self.remote + self.recent + self.innovation


def edge_index(wiener, time, what="time"):
    e = wiener.edges
    i = int(np.searchsorted(e, time - 1e-9 * max(1.0, abs(time))))
    if i >= e.size or abs(e[i] - time) > 1e-9 * max(1.0, abs(time)):
        raise NoiseError(f"{what}={time:g} is not a cell edge of the Wiener record")
    return i


def shift_weights(kernel, wiener, ilo, ihi, tau, t_grid, w_table=None):
    """Weights ``A[i, c] = avg_c g(u - tau - t_i) - avg_c g(u - tau)`` for cells ``ilo..ihi-1``.

    Cells on the uniform part read a lookup table of exact cell averages
    (``w_table``, computed on demand); far cells use the antiderivative.
    """
    e = wiener.edges
    t_grid = np.asarray(t_grid, dtype=float)
    n_far = wiener.n_far
    A = np.zeros((t_grid.size, max(ihi - ilo, 0)))
    if ihi <= ilo:
        return A
    f_hi = min(ihi, n_far)
    if ilo < f_hi:
        a, b = e[ilo:f_hi], e[ilo + 1 : f_hi + 1]
        A[:, : f_hi - ilo] = (kernel.cell_average(a[None, :], b[None, :], tau + t_grid[:, None])
                              - kernel.cell_average(a, b, tau)[None, :])
    u_lo = max(ilo, n_far)
    if u_lo < ihi:
        h = wiener.step
        j = np.arange(u_lo, ihi) - n_far  # uniform cell j spans [-t_near + j h, -t_near + (j+1) h]
        s_idx = _snap(np.concatenate([[tau], tau + t_grid]) + wiener.t_near, h, "tau + t")
        need = int(s_idx.max()) + 1
        if w_table is None or w_table.size < need:
            w_table = _fine_weights(kernel, h, need)
        lag = s_idx[:, None] - 1 - j[None, :]
        W = np.where(lag >= 0, w_table[np.clip(lag, 0, None)], 0.0)
        A[:, u_lo - ilo :] = W[1:] - W[0][None, :]
    return A


def increment_rows(wiener, rows=None, ilo=0, ihi=None):
    """Increments of cells ``ilo..ihi-1`` for the selected replica rows."""
    inc = wiener.increments
    ihi = inc.shape[1] if ihi is None else ihi
    return inc[:, ilo:ihi] if rows is None else inc[rows, ilo:ihi]


def component_path(kernel, wiener, lo, hi, tau, t_grid, rows=None):
    """``sum over cells in [lo, hi] of (avg g(u - tau - t) - avg g(u - tau)) dW``.

    ``lo``/``hi`` are cell edges; the result has shape ``(n_rows, n_t, d)``.
    """
    ilo, ihi = edge_index(wiener, lo, "lo"), edge_index(wiener, hi, "hi")
    A = shift_weights(kernel, wiener, ilo, ihi, tau, t_grid)
    return np.einsum("ic,rcd->rid", A, increment_rows(wiener, rows, ilo, ihi))


def decompose_noise(kernel, wiener, theta, tau, t_grid=None):
    """Split ``G_{t+tau} - G_tau`` into remote past, recent past and innovation.

    ``theta`` and ``tau`` must be cell edges with ``theta <= tau`` and the
    record must cover ``tau + max(t_grid)``.
    """
    if theta > tau:
        raise NoiseError(f"need theta <= tau, got theta={theta}, tau={tau}")
    if t_grid is None:
        t_grid = wiener.step * np.arange(_n_steps(1.0, wiener.step) + 1)
    t_grid = np.asarray(t_grid, dtype=float)
    end = tau + t_grid.max()
    if end > wiener.horizon + 1e-9:
        raise NoiseError(f"Wiener record ends at {wiener.horizon:g} < tau + t = {end:g}")
    start = float(wiener.edges[0])
    remote = component_path(kernel, wiener, start, theta, tau, t_grid)
    recent = component_path(kernel, wiener, theta, tau, tau, t_grid)
    innov = component_path(kernel, wiener, tau, float(wiener.edges[edge_index(wiener, end, "tau + t")]), tau, t_grid)
    return NoiseDecomposition(t_grid, remote, recent, innov, float(theta), float(tau))


def innovation_paths(kernel, wiener, T=1.0, start=0.0):
    """``Z_t = int_start^{start+t} g(u - start - t) dW_u`` on the uniform grid of ``[0, T]``.

    Vectorised convolution over all replicas; shape ``(n_rep, n_t, d)``.
    """
    h = wiener.step
    n = _n_steps(T, h)
    i0 = _snap(start, h, "start")
    inc = wiener.fut_incr[:, i0 : i0 + n]
    if inc.shape[1] < n:
        raise NoiseError("Wiener record too short for the innovation window")
    w = _fine_weights(kernel, h, n)
    L = _fft_len(2 * n)
    conv = sfft.irfft(sfft.rfft(inc, n=L, axis=1) * sfft.rfft(w, n=L)[None, :, None], n=L, axis=1)[:, :n]
    return np.concatenate([np.zeros((inc.shape[0], 1, inc.shape[2])), conv], axis=1)


# ---------------------------------------------------------------------------
# exact fBm oracle
# ---------------------------------------------------------------------------


def fbm_covariance(H, s, t):
    s, t = np.asarray(s, float), np.asarray(t, float)
    return 0.5 * (np.abs(s) ** (2 * H) + np.abs(t) ** (2 * H) - np.abs(t - s) ** (2 * H))


def exact_fbm_oracle(H, grid, seed, n_paths=1, replica_offset=0, method="auto"):
    """Exact fractional Brownian motion samples with ``Var(B_1) = 1``.

    ``grid`` is uniform (``t_k = k h``; a leading ``0`` is allowed).
    Circulant embedding of the increments is used, with a dense Cholesky
    factorization as fallback when the embedding is not nonnegative.
    Returns an array of shape ``(n_paths, len(grid))``.
    """
    grid = np.asarray(grid, dtype=float)
    lead0 = grid[0] == 0.0
    pts = grid[1:] if lead0 else grid
    h = pts[0]
    n = pts.size
    if not np.allclose(pts, h * np.arange(1, n + 1), rtol=1e-9, atol=1e-12):
        raise NoiseError("exact_fbm_oracle needs a uniform grid t_k = k h")
    reps = np.arange(replica_offset, replica_offset + n_paths)
    k = np.arange(n + 1, dtype=float)
    gam = 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H)) * h ** (2 * H)
    incs = None
    if method in ("auto", "circulant"):
        row = np.concatenate([gam[: n + 1], gam[n - 1 : 0 : -1]])
        lam = np.fft.fft(row).real
        if lam.min() >= -1e-10 * lam.max():
            lam = np.clip(lam, 0.0, None)
            m = row.size
            z = standard_normals(seed, reps, _AUX, 0, (2, m))
            xi = z[:, 0] + 1j * z[:, 1]
            incs = np.fft.fft(np.sqrt(lam / m)[None, :] * xi, axis=1).real[:, :n]
        elif method == "circulant":
            raise NoiseError("circulant embedding not nonnegative")
        else:
            warnings.warn("circulant embedding failed; using dense factorization", RuntimeWarning)
    if incs is None:
        cov = linalg.toeplitz(gam[:n])
        L = linalg.cholesky(cov, lower=True)
        z = standard_normals(seed, reps, _AUX, 1, (n,))
        incs = z @ L.T
    path = np.cumsum(incs, axis=1)
    return np.concatenate([np.zeros((n_paths, 1)), path], axis=1) if lead0 else path


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def weighted_holder_norm(values, s, beta):
    """``max |w_s| / (1 + s)^beta`` over a grid of ``s >= 0``.

    ``values`` may carry leading batch axes and a trailing dimension axis
    matching ``s`` on the axis before it; the norm is taken per batch entry.
    """
    if beta <= 0.5:
        warnings.warn(f"beta={beta} <= 1/2: the weighted norm of a Wiener path is infinite; "
                      "result is the truncated grid maximum", RuntimeWarning)
    s = np.asarray(s, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        return float(np.max(np.abs(v) / (1.0 + s) ** beta)) if v.size else 0.0
    mag = np.linalg.norm(v, axis=-1) if v.shape[-1] != s.size else np.abs(v)
    return np.max(mag / (1.0 + s) ** beta, axis=-1)


@dataclass(frozen=True)
class SmallBallEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    hits: int
    n: int


def small_ball_estimate(kernel, eps, n_paths, psi=None, step=1e-3, seed=0, batch=2000):
    """Fraction of innovation paths with ``sup_[0,1] |Z - psi| <= eps`` (Wilson CI).

    With no hit the estimate is 0 and ``ci_high`` is the one-sided bound.
    """
    if eps <= 0:
        raise NoiseError("eps must be positive")
    hits = 0
    for r0 in range(0, n_paths, batch):
        reps = np.arange(r0, min(n_paths, r0 + batch))
        w = sample_wiener(0.0, 1.0, step, seed, reps)
        z = innovation_paths(kernel, w, 1.0)
        if psi is not None:
            z = z - np.reshape(psi, (1, -1, 1) if np.ndim(psi) == 1 else np.shape(psi))
        sup = np.abs(z).max(axis=(1, 2))
        hits += int(np.count_nonzero(sup <= eps))
    lo, hi = wilson_interval(hits, n_paths)
    if hits == 0:
        lo, hi = 0.0, 1.0 - 0.05 ** (1.0 / n_paths)
    return SmallBallEstimate(hits / n_paths, lo, hi, hits, n_paths)


def brownian_small_ball(eps, T=1.0, terms=60):
    """``P(sup_[0,T] |B| <= eps)`` from the classical alternating series."""
    k = np.arange(terms)
    a = eps / math.sqrt(T)
    return float(4 / np.pi * np.sum((-1.0) ** k / (2 * k + 1) * np.exp(-((2 * k + 1) ** 2) * np.pi**2 / (8 * a * a))))


def write_path_csv(path, grid, values, prefix="g"):
    """CSV with columns ``t, <prefix>_1..<prefix>_d`` for a single replica."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    d = values.shape[1]
    header = ",".join(["t"] + [f"{prefix}_{i + 1}" for i in range(d)])
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for t, row in zip(grid, values):
            fh.write(",".join(repr(float(x)) for x in (t, *row)) + "\n")
