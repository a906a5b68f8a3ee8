"""Truncated chaos expansion of the solution on a space-time grid.

The order-``n`` kernel is averaged over products of grid cells, symmetrized,
and carried to the coordinates ``zeta`` of the noise (``dW = A zeta`` with
``A = L_time (x) L_space``).  The tensors are scaled so that
``||T_n||^2 -> alpha_n(t) / n!`` and ``I_n = T_n[zeta, ..., zeta] / sqrt(n!)``
summed over distinct indices, hence ``Var I_n = ||T_n||^2`` and
``E u_N^2 = 1 + sum_n ||T_n||^2``.

Cell averages of ``G`` against a backward light cone are polygon areas and are
computed exactly.  Higher orders integrate the intermediate chain points on a
lattice of ``q x q`` midpoints per cell; boundary ties get weight 1/2.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import kernels
from .model import CovarianceModel, big_gamma
from .noise import (CHUNK, CellCovariance, GridError, GridSpec, NoiseSample, _chunk_rng,
                    cell_covariance, factorize, standard_normals)

__all__ = [
    "ORDER3_MAX_SIDE",
    "EPS_Q",
    "ChaosCoefficients",
    "SolutionSample",
    "MalliavinSample",
    "MomentReport",
    "LawReport",
    "DensityReport",
    "ModulusEstimate",
    "SixReport",
    "ApproximantReport",
    "cone_cell_area",
    "psi_grid",
    "project_kernels",
    "cell_averages",
    "sample_solution",
    "solution_batch",
    "malliavin_sample",
    "malliavin_batch",
    "picard_consistency",
    "mc_second_moment",
    "chaos_law_check",
    "derivative_moment",
    "density_report",
    "modulus_g",
    "delta_scan",
    "sample_field",
    "partition_approximant",
]

ORDER3_MAX_SIDE = 10
SUBPOINTS = 4
EPS_Q = 1e-8
_TIE = 1e-12


# ---------------------------------------------------------------------------
# cell averages

def cone_cell_area(a0, a1, b0, b1, pt, px):
    """Area of ``[a0, a1] x [b0, b1]`` inside the backward cone ``{s < pt, |y - px| < pt - s}``.

    The width of the slice at time ``s`` is piecewise linear in ``s``, so a
    trapezoid rule between its kinks is exact.
    """
    a0, a1, b0, b1, pt, px = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (a0, a1, b0, b1, pt, px)))
    end = np.minimum(a1, pt)
    k0 = np.clip(pt - np.abs(b0 - px), a0, end)
    k1 = np.clip(pt - np.abs(b1 - px), a0, end)
    s = np.sort(np.stack([a0, k0, k1, end], -1), -1)
    R = pt[..., None] - s
    width = np.clip(np.minimum(b1[..., None], px[..., None] + R)
                    - np.maximum(b0[..., None], px[..., None] - R), 0.0, None)
    area = np.sum(np.diff(s, axis=-1) * (width[..., 1:] + width[..., :-1]) / 2, -1)
    return np.where(end > a0, area, 0.0)


def psi_grid(t: float, n: int = 64) -> float:
    """``int_0^t int G(r, z)^2 dz dr`` summed cell by cell on an ``n x 2n`` grid."""
    te = np.linspace(0.0, t, n + 1)
    xe = np.linspace(-t, t, 2 * n + 1)
    # G(t - s, x - y)^2 = 1/4 on the backward cone of (t, 0)
    area = cone_cell_area(te[:-1, None], te[1:, None], xe[None, :-1], xe[None, 1:], t, 0.0)
    return float(0.25 * np.sum(area))


def _g_lattice(dt, dx):
    """``G`` at lattice offsets with weight 1/2 on the cone boundary."""
    dt = np.asarray(dt, dtype=float)
    dx = np.abs(np.asarray(dx, dtype=float))
    inside = (dx < dt - _TIE).astype(float)
    edge = (dx <= dt + _TIE).astype(float)
    return np.where(dt > _TIE, 0.25 * (inside + edge), 0.0)


@dataclass(frozen=True)
class _Lattice:
    grid: GridSpec
    q: int

    @property
    def off_t(self) -> np.ndarray:
        return (np.arange(self.q) + 0.5) / self.q * self.grid.dt

    @property
    def off_x(self) -> np.ndarray:
        return (np.arange(self.q) + 0.5) / self.q * self.grid.dx

    def target_weights(self, t: float, x: float) -> np.ndarray:
        """``G(t - p_t, x - p_x)`` at every sub-point, shape ``(nt, nx, q, q)``."""
        g = self.grid
        pt = g.time_edges()[:-1, None, None, None] + self.off_t[None, None, :, None]
        px = g.space_edges()[None, :-1, None, None] + self.off_x[None, None, None, :]
        return _g_lattice(t - pt, x - px)

    def table(self) -> np.ndarray:
        """Average of ``G(p - .)`` over a cell, for ``p`` at sub-point ``(a, b)`` of the
        cell ``(di, dj)`` steps later; shape ``(nt, 2 nx - 1, q, q)``."""
        g = self.grid
        di = np.arange(g.nt)[:, None, None, None] * g.dt
        dj = np.arange(-(g.nx - 1), g.nx)[None, :, None, None] * g.dx
        pt = di + self.off_t[None, None, :, None]
        px = dj + self.off_x[None, None, None, :]
        return 0.5 * cone_cell_area(0.0, g.dt, 0.0, g.dx, pt, px) / (g.dt * g.dx)

    def spread(self, tab: np.ndarray) -> np.ndarray:
        """``B[i1, j1, i2, j2, a, b]``: the table laid out over cell pairs."""
        g = self.grid
        i1, i2 = np.arange(g.nt)[:, None], np.arange(g.nt)[None, :]
        j1, j2 = np.arange(g.nx)[:, None], np.arange(g.nx)[None, :]
        dI = i2 - i1
        B = tab[np.clip(dI, 0, None)[:, None, :, None], (j2 - j1 + g.nx - 1)[None, :, None, :]]
        return B * (dI >= 0)[:, None, :, None, None, None]


def _order1(grid: GridSpec, t: float, x: float) -> np.ndarray:
    te, xe = grid.time_edges(), grid.space_edges()
    area = cone_cell_area(te[:-1, None], te[1:, None], xe[None, :-1], xe[None, 1:], t, x)
    return 0.5 * area / (grid.dt * grid.dx)


def _order2(lat: _Lattice, tab: np.ndarray, t: float, x: float) -> np.ndarray:
    g = lat.grid
    gt = lat.target_weights(t, x)
    F = np.zeros((g.nt, g.nx, g.nt, g.nx))
    i1 = np.arange(g.nt)
    dJ = np.arange(g.nx)[:, None] - np.arange(g.nx)[None, :] + g.nx - 1   # (j2, j1)
    for i2 in range(g.nt):
        w = gt[i2]
        if not w.any():
            continue
        dI = i2 - i1
        ok = dI >= 0
        sub = tab[np.clip(dI, 0, None)[:, None, None], dJ[None]]            # (i1, j2, j1, q, q)
        block = np.einsum("ikjab,kab->ijk", sub, w) / lat.q**2
        F[:, :, i2, :] = np.where(ok[:, None, None], block, 0.0)
    return F


def _order3(lat: _Lattice, tab: np.ndarray, t: float, x: float) -> np.ndarray:
    g, q = lat.grid, lat.q
    m, Q = g.nt * g.nx, q * q
    B = lat.spread(tab).reshape(m, m, Q)                                 # (c1, c2, sub)
    ft = (g.time_edges()[:-1, None] + lat.off_t[None]).reshape(-1)     # fine times (nt*q)
    fx = (g.space_edges()[:-1, None] + lat.off_x[None]).reshape(-1)
    # fine point index order (i, a, j, b) -> reshape to (nt, q, nx, q)
    Pt = np.broadcast_to(ft[:, None], (g.nt * q, g.nx * q)).reshape(g.nt, q, g.nx, q)
    Px = np.broadcast_to(fx[None, :], (g.nt * q, g.nx * q)).reshape(g.nt, q, g.nx, q)
    Pt = Pt.transpose(0, 2, 1, 3).reshape(m, Q)
    Px = Px.transpose(0, 2, 1, 3).reshape(m, Q)
    gt = _g_lattice(t - Pt, x - Px)                                     # (c3, sub3)
    Kf = _g_lattice(Pt[None, None] - Pt[:, :, None, None], Px[None, None] - Px[:, :, None, None])
    Kbar = np.einsum("pkcl,cl->pkc", Kf, gt) / Q                         # (c2, sub2, c3)
    F = np.einsum("abk,bkc->abc", B, Kbar) / Q
    return F.reshape((g.nt, g.nx) * 3)


def cell_averages(grid: GridSpec, t: float, x: float, N: int, q: int = SUBPOINTS) -> list[np.ndarray]:
    """Unsymmetrized cell averages of ``f_1, ..., f_N`` (flattened cell indices)."""
    m = grid.cells
    out = [_order1(grid, t, x).reshape(m)]
    if N >= 2:
        lat = _Lattice(grid, q)
        tab = lat.table()
        out.append(_order2(lat, tab, t, x).reshape(m, m))
        if N >= 3:
            out.append(_order3(lat, tab, t, x).reshape(m, m, m))
    return out


def _symmetrize(F: np.ndarray) -> np.ndarray:
    n = F.ndim
    if n == 1:
        return F
    perms = list(itertools.permutations(range(n)))
    return sum(np.transpose(F, p) for p in perms) / len(perms)


def _to_zeta(cov: CellCovariance, F: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Apply ``A^T = L_time^T (x) L_space^T`` along every mode."""
    n = F.ndim
    X = F.reshape((grid.nt, grid.nx) * n)
    for k in range(n):
        X = np.moveaxis(X, (2 * k, 2 * k + 1), (0, 1))
        X = np.einsum("ai,bj,ij...->ab...", cov.L_time.T, cov.L_space.T, X)
        X = np.moveaxis(X, (0, 1), (2 * k, 2 * k + 1))
    return X.reshape((grid.cells,) * n)


def _zero_diagonals(T: np.ndarray) -> np.ndarray:
    T = T.copy()
    n, m = T.ndim, T.shape[0]
    idx = np.arange(m)
    for a, b in itertools.combinations(range(n), 2):
        view = np.moveaxis(T, (a, b), (0, 1))
        view[idx, idx] = 0.0
    return T


@dataclass(frozen=True)
class ChaosCoefficients:
    grid: GridSpec
    cov: CellCovariance
    t: float
    x: float
    N: int
    tensors: tuple[np.ndarray, ...]
    q: int = SUBPOINTS

    @property
    def m(self) -> int:
        return self.grid.cells

    def norms2(self) -> list[float]:
        """``||T_n||^2`` for ``n = 1..N``."""
        return [float(np.sum(T * T)) for T in self.tensors]

    def second_moment(self) -> float:
        return 1.0 + sum(self.norms2())


def _check_target(grid: GridSpec, t: float, x: float) -> None:
    if not (0 < t <= grid.T + 1e-12 and abs(x) + t <= grid.L + 1e-12):
        raise GridError("target backward cone must lie inside the grid")


def project_kernels(model: CovarianceModel, grid: GridSpec, t: float, x: float, N: int,
                    cov: CellCovariance | None = None, q: int = SUBPOINTS) -> ChaosCoefficients:
    """Chaos coefficient tensors of ``u_N(t, x)`` in the noise coordinates."""
    if not 0 <= N <= 3:
        raise ValueError("N must lie in 0..3")
    if N == 3 and max(grid.nt, grid.nx) > ORDER3_MAX_SIDE:
        raise GridError(f"order 3 needs nt, nx <= {ORDER3_MAX_SIDE}")
    _check_target(grid, t, x)
    if cov is None:
        cov = factorize(cell_covariance(model, grid))
    if not cov.factorized:
        raise ValueError("factorization missing")
    raw = cell_averages(grid, t, x, N, q) if N else []
    tensors = []
    for n, F in enumerate(raw, start=1):
        T = math.sqrt(math.factorial(n)) * _to_zeta(cov, _symmetrize(F), grid)
        tensors.append(_zero_diagonals(T) if n > 1 else T)
    return ChaosCoefficients(grid, cov, float(t), float(x), N, tuple(tensors), q)


# ---------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class SolutionSample:
    value: float
    contributions: tuple[float, ...]
    seed: int | None = None


@dataclass(frozen=True)
class MalliavinSample:
    gradient: np.ndarray
    density: np.ndarray
    Q: float


def _flat(coeffs: ChaosCoefficients, zeta: np.ndarray) -> np.ndarray:
    Z = np.asarray(zeta, dtype=float)
    return Z.reshape(-1, coeffs.m)


def solution_batch(coeffs: ChaosCoefficients, zeta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(u_N, I)`` for a batch of coordinates; ``I`` has one column per order."""
    Z = _flat(coeffs, zeta)
    I = np.zeros((len(Z), coeffs.N))
    for lo in range(0, len(Z), 1024):
        z = Z[lo:lo + 1024]
        for n, T in enumerate(coeffs.tensors, start=1):
            if n == 1:
                v = z @ T
            elif n == 2:
                v = np.einsum("bi,bi->b", z @ T, z)
            else:
                Y = (z @ T.reshape(coeffs.m, -1)).reshape(len(z), coeffs.m, coeffs.m)
                v = np.einsum("bij,bi,bj->b", Y, z, z)
            I[lo:lo + len(z), n - 1] = v / math.sqrt(math.factorial(n))
    return 1.0 + I.sum(axis=1), I


def sample_solution(coeffs: ChaosCoefficients, noise: NoiseSample) -> SolutionSample:
    u, I = solution_batch(coeffs, noise.zeta[None])
    return SolutionSample(float(u[0]), tuple(float(v) for v in I[0]), noise.seed)


def _gradient(coeffs: ChaosCoefficients, z: np.ndarray) -> np.ndarray:
    m = coeffs.m
    g = np.zeros((len(z), m))
    for n, T in enumerate(coeffs.tensors, start=1):
        c = n / math.sqrt(math.factorial(n))
        if n == 1:
            g += T[None, :]
        elif n == 2:
            g += c * (z @ T)
        else:
            Y = (z @ T.reshape(m, -1)).reshape(len(z), m, m)
            g += c * np.einsum("bjk,bj->bk", Y, z)
    return g


def malliavin_batch(coeffs: ChaosCoefficients, zeta: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients, cell densities of ``D u_N`` and ``Q`` for a batch of coordinates.

    Cell values are averages of the kernels, so ``D u_N`` on a cell equals
    ``du_N / d(dW_cell) = (A^-T grad)_cell`` without any area factor.
    """
    Z = _flat(coeffs, zeta)
    g = coeffs.grid
    grads = np.empty_like(Z)
    dens = np.empty((len(Z), g.nt, g.nx))
    for lo in range(0, len(Z), 1024):
        gr = _gradient(coeffs, Z[lo:lo + 1024])
        grads[lo:lo + len(gr)] = gr
        dens[lo:lo + len(gr)] = coeffs.cov.solve_factor_T(gr.reshape(-1, g.nt, g.nx))
    Q = np.sum(dens * dens, axis=(1, 2)) * g.dt * g.dx
    return grads, dens, Q


def malliavin_sample(coeffs: ChaosCoefficients, noise: NoiseSample) -> MalliavinSample:
    gr, dens, Q = malliavin_batch(coeffs, noise.zeta[None])
    return MalliavinSample(gr[0], dens[0], float(Q[0]))


# ---------------------------------------------------------------------------
# Picard recursion at the coefficient level

def picard_consistency(model: CovarianceModel, grid: GridSpec, N: int, t: float | None = None,
                       x: float = 0.0, q: int = SUBPOINTS) -> float:
    """Max relative defect between direct and recursively smoothed tensors.

    The recursive route rebuilds order ``n`` by averaging ``G(target - p)``
    times the order ``n - 1`` coefficients for target ``p`` over the lattice
    points ``p`` of the last cell, reusing the order ``n - 1`` projection as a
    black box.  Order 1 is the smoothing of the constant 1.
    """
    if not 1 <= N <= 3:
        raise ValueError("N must lie in 1..3")
    t = grid.T if t is None else t
    cov = factorize(cell_covariance(model, grid))
    direct = project_kernels(model, grid, t, x, N, cov, q)
    lat = _Lattice(grid, q)
    gt = lat.target_weights(t, x)
    te, xe = grid.time_edges(), grid.space_edges()
    m = grid.cells
    rec = [_order1(grid, t, x).reshape(m)]
    tab = lat.table() if N >= 2 else None
    for n in range(2, N + 1):
        F = np.zeros((m,) * n)
        for i in range(grid.nt):
            for j in range(grid.nx):
                for a in range(q):
                    for b in range(q):
                        w = gt[i, j, a, b]
                        if w == 0.0:
                            continue
                        pt, px = te[i] + lat.off_t[a], xe[j] + lat.off_x[b]
                        if n == 2:
                            prev = _order1(grid, pt, px).reshape(m)
                        else:
                            prev = _order2(lat, tab, pt, px).reshape(m, m)
                        F[..., i * grid.nx + j] += w * prev / q**2
        rec.append(F)
    worst = 0.0
    for n, (T, F) in enumerate(zip(direct.tensors, rec), start=1):
        R = math.sqrt(math.factorial(n)) * _to_zeta(cov, _symmetrize(F), grid)
        if n > 1:
            R = _zero_diagonals(R)
        scale = max(float(np.max(np.abs(T))), 1e-300)
        worst = max(worst, float(np.max(np.abs(T - R))) / scale)
    return worst


# ---------------------------------------------------------------------------
# Monte Carlo reports

@dataclass
class MomentReport:
    N: int
    nsamples: int
    mc_mean: float
    mc_se: float
    discrete: float
    continuum: float
    continuum_tail: float
    norms2: list[float] = field(default_factory=list)

    @property
    def z_discrete(self) -> float:
        return (self.mc_mean - self.discrete) / self.mc_se if self.mc_se > 0 else 0.0

    @property
    def continuum_gap(self) -> float:
        return abs(self.discrete - self.continuum) / self.continuum

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(z_discrete=self.z_discrete, continuum_gap=self.continuum_gap)
        return d


def mc_second_moment(model: CovarianceModel, grid: GridSpec, t: float, x: float, N: int,
                     nsamples: int, seed: int, threads: int = 1,
                     coeffs: ChaosCoefficients | None = None) -> MomentReport:
    """Monte Carlo ``E u_N^2`` against the exact discrete value and the continuum series."""
    series = kernels.second_moment_series(model, t, N)
    if N == 0:
        return MomentReport(0, nsamples, 1.0, 0.0, 1.0, 1.0, series.tail_bound or 0.0)
    if nsamples < 10_000:
        raise ValueError("nsamples must be at least 10^4")
    coeffs = coeffs or project_kernels(model, grid, t, x, N)
    u2 = np.empty(nsamples)
    for lo in range(0, nsamples, CHUNK):
        cnt = min(CHUNK, nsamples - lo)
        Z = _chunk_normals(grid, seed, lo // CHUNK, cnt)
        u, _ = solution_batch(coeffs, Z)
        u2[lo:lo + cnt] = u * u
    return MomentReport(N, nsamples, float(u2.mean()), float(u2.std(ddof=1) / math.sqrt(nsamples)),
                        coeffs.second_moment(), float(series.partial_sum),
                        float(series.tail_bound), coeffs.norms2())


def _chunk_normals(grid: GridSpec, seed: int, chunk: int, count: int) -> np.ndarray:
    """Normals of chunk ``chunk`` in the same stream as :func:`noise.standard_normals`."""
    return _chunk_rng(seed, chunk).standard_normal((count, grid.nt, grid.nx))


def _stream(coeffs: ChaosCoefficients, seed: int, nsamples: int, threads: int = 1) -> np.ndarray:
    return standard_normals(seed, nsamples, (coeffs.grid.nt, coeffs.grid.nx), threads)


@dataclass
class LawReport:
    nsamples: int
    variance: list[float]
    variance_se: list[float]
    expected: list[float]
    cross: dict[str, float]
    cross_se: dict[str, float]

    def isometry_z(self) -> list[float]:
        return [(v - e) / s for v, e, s in zip(self.variance, self.expected, self.variance_se)]

    def orthogonality_z(self) -> dict[str, float]:
        return {k: v / self.cross_se[k] for k, v in self.cross.items()}

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(isometry_z=self.isometry_z(), orthogonality_z=self.orthogonality_z())
        return d


def chaos_law_check(coeffs: ChaosCoefficients, nsamples: int, seed: int, threads: int = 1) -> LawReport:
    """Sample moments of the chaos components ``I_n``."""
    I = np.empty((nsamples, coeffs.N))
    for lo in range(0, nsamples, CHUNK):
        cnt = min(CHUNK, nsamples - lo)
        _, I[lo:lo + cnt] = solution_batch(coeffs, _chunk_normals(coeffs.grid, seed, lo // CHUNK, cnt))
    var, se = [], []
    for n in range(coeffs.N):
        sq = I[:, n] ** 2
        var.append(float(sq.mean()))
        se.append(float(sq.std(ddof=1) / math.sqrt(nsamples)))
    cross, cse = {}, {}
    for a, b in itertools.combinations(range(coeffs.N), 2):
        pr = I[:, a] * I[:, b]
        cross[f"{a + 1},{b + 1}"] = float(pr.mean())
        cse[f"{a + 1},{b + 1}"] = float(pr.std(ddof=1) / math.sqrt(nsamples))
    return LawReport(nsamples, var, se, coeffs.norms2(), cross, cse)


def derivative_moment(model: CovarianceModel, grid: GridSpec, t: float, x: float, N: int,
                      r_values: Sequence[float], nsamples: int, seed: int) -> list[dict]:
    """MC estimate of ``E int |D_{r, z} u_N|^2 dz`` at the time rows containing each ``r``."""
    coeffs = project_kernels(model, grid, t, x, N)
    rows = [min(int(r / grid.dt), grid.nt - 1) for r in r_values]
    acc = np.zeros((len(rows), nsamples))
    for lo in range(0, nsamples, CHUNK):
        cnt = min(CHUNK, nsamples - lo)
        _, dens, _ = malliavin_batch(coeffs, _chunk_normals(grid, seed, lo // CHUNK, cnt))
        for k, i in enumerate(rows):
            acc[k, lo:lo + cnt] = np.sum(dens[:, i, :] ** 2, axis=1) * grid.dx
    return [{"r": float(r), "row": i, "mean": float(a.mean()),
             "se": float(a.std(ddof=1) / math.sqrt(nsamples))}
            for r, i, a in zip(r_values, rows, acc)]


# ---------------------------------------------------------------------------
# law of u_N

@dataclass
class DensityReport:
    n: int
    bandwidth: float
    kde_x: np.ndarray
    kde_y: np.ndarray
    atom_width: float
    atom_mass: float
    atom_location: float
    truncation_mass: dict[int, float]
    excluded_mass: float
    away_mass: float
    ks_stat: float | None = None
    ks_pvalue: float | None = None
    ks_critical: float | None = None

    @property
    def atom_flagged(self) -> bool:
        return self.atom_mass > 0.5

    def as_dict(self) -> dict:
        return {
            "n": self.n, "bandwidth": self.bandwidth, "atom_width": self.atom_width,
            "atom_mass": self.atom_mass, "atom_location": self.atom_location,
            "atom_flagged": self.atom_flagged, "excluded_mass": self.excluded_mass,
            "away_mass": self.away_mass,
            "truncation_mass": {str(k): v for k, v in self.truncation_mass.items()},
            "ks_stat": self.ks_stat, "ks_pvalue": self.ks_pvalue, "ks_critical": self.ks_critical,
        }


def density_report(samples: np.ndarray, bandwidth: float | None = None, m_max: int = 10,
                   atom_width: float = 1e-3, exact: tuple[float, float] | None = None,
                   grid_points: int = 256) -> DensityReport:
    """Kernel density away from 0, atom scan, truncation masses and an optional KS test.

    ``exact`` is ``(mean, variance)`` of a reference normal law.
    """
    u = np.asarray(samples, dtype=float).ravel()
    n = u.size
    if n < 10_000:
        raise ValueError("need at least 10^4 samples")
    h0 = bandwidth if bandwidth is not None else 1.06 * float(np.std(u)) * n ** (-0.2)
    h0 = max(h0, 1e-12)
    away = u[np.abs(u) > h0]
    xs = np.linspace(float(u.min()), float(u.max()), grid_points)
    xs = xs[np.abs(xs) > h0]
    if away.size > 1 and np.ptp(away) > 0:
        kde = stats.gaussian_kde(away, bw_method=h0 / float(np.std(away)))
        ys = kde(xs) * away.size / n
    else:
        ys = np.zeros_like(xs)
    # atom scan: most populated window of the given width, excluding (-h0, h0)
    s = np.sort(away)
    if s.size:
        right = np.searchsorted(s, s + atom_width, side="right")
        counts = right - np.arange(s.size)
        k = int(np.argmax(counts))
        mass, loc = float(counts[k]) / n, float(s[k])
    else:
        mass, loc = 0.0, 0.0
    trunc = {m: float(np.mean(np.abs(u) <= 1.0 / m)) for m in range(1, m_max + 1)}
    rep = DensityReport(n, h0, xs, ys, atom_width, mass, loc, trunc,
                        1.0 - away.size / n, away.size / n)
    if exact is not None:
        mu, var = exact
        res = stats.kstest(u, stats.norm(loc=mu, scale=math.sqrt(var)).cdf)
        rep.ks_stat, rep.ks_pvalue = float(res.statistic), float(res.pvalue)
        rep.ks_critical = 1.36 / math.sqrt(n)
    return rep


# ---------------------------------------------------------------------------
# continuity modulus and the density experiment

@dataclass
class ModulusEstimate:
    delta: float
    value: float
    se: float
    exact: float
    worst_point: tuple[float, float] | None


def _neighbourhood(t: float, x: float, delta: float) -> list[tuple[float, float]]:
    pts = []
    for s in np.linspace(t - delta, t, 3):
        for y in np.linspace(x - delta, x + delta, 5):
            if not (abs(s - t) < 1e-15 and abs(y - x) < 1e-15):
                pts.append((float(s), float(y)))
    return pts


def modulus_g(model: CovarianceModel, grid: GridSpec, t: float, x: float, delta: float,
              nsamples: int, seed: int = 0, N: int = 2, cov: CellCovariance | None = None,
              base: ChaosCoefficients | None = None) -> ModulusEstimate:
    """``sup (E|u_N(t,x) - u_N(s,y)|^2)^(1/2)`` over a lattice of the ``delta``-neighbourhood."""
    if delta == 0:
        return ModulusEstimate(0.0, 0.0, 0.0, 0.0, None)
    if not 0 < delta < min(t, grid.L - abs(x)):
        raise ValueError("delta must lie in (0, min(t, L - |x|))")
    cov = cov or factorize(cell_covariance(model, grid))
    base = base or project_kernels(model, grid, t, x, N, cov)
    best = ModulusEstimate(delta, -1.0, 0.0, 0.0, None)
    Z = _stream(base, seed, nsamples).reshape(nsamples, -1)
    u0, _ = solution_batch(base, Z)
    for s, y in _neighbourhood(t, x, delta):
        other = project_kernels(model, grid, s, y, N, cov)
        exact = sum(float(np.sum((a - b) ** 2)) for a, b in zip(base.tensors, other.tensors))
        u1, _ = solution_batch(other, Z)
        d2 = (u0 - u1) ** 2
        mean = float(d2.mean())
        if mean > best.value**2 or best.value < 0:
            val = math.sqrt(mean)
            se = float(d2.std(ddof=1) / math.sqrt(nsamples)) / (2 * val) if val > 0 else 0.0
            best = ModulusEstimate(delta, val, se, math.sqrt(exact), (s, y))
    return best


@dataclass
class SixReport:
    m: int
    t: float
    x: float
    deltas: list[float]
    gamma_delta: list[float]
    g: list[float]
    g_se: list[float]
    g_exact: list[float]
    rhs: list[float]
    p_small_Q: float
    eps: float
    nsamples: int
    constants: dict

    @property
    def rhs_decreasing(self) -> bool:
        order = np.argsort(self.deltas)[::-1]
        r = np.asarray(self.rhs)[order]
        return bool(np.all(np.diff(r) < 0))

    @property
    def halved(self) -> bool:
        i_min, i_max = int(np.argmin(self.deltas)), int(np.argmax(self.deltas))
        return self.rhs[i_min] < self.rhs[i_max] / 2

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d.update(rhs_decreasing=self.rhs_decreasing, halved=self.halved)
        return d


def delta_scan(model: CovarianceModel, grid: GridSpec, t: float, x: float, m: int,
               delta_grid: Sequence[float], nsamples: int, seed: int = 0, N: int = 2,
               modulus_samples: int = 4000) -> SixReport:
    """Bound of the density experiment on ``{Q < eps} cap {|u| > 1/m}`` along a ``delta`` grid."""
    ms = kernels.second_moment_series(model, t, 3)
    c_star = ms.partial_sum + ms.tail_bound
    table = kernels.constants_table(model, t, c_star)
    cov = factorize(cell_covariance(model, grid))
    base = project_kernels(model, grid, t, x, N, cov)
    gam, gs, gse, gex, rhs = [], [], [], [], []
    for d in delta_grid:
        est = modulus_g(model, grid, t, x, d, modulus_samples, seed, N, cov, base)
        G = big_gamma(model, d)
        val = 8 * m * m * (table.c0 * (table.C_T + table.C_T_dprime) * G + 0.25 * c_star * est.value)
        gam.append(G), gs.append(est.value), gse.append(est.se), gex.append(est.exact), rhs.append(val)
    hits = 0
    for lo in range(0, nsamples, CHUNK):
        cnt = min(CHUNK, nsamples - lo)
        Z = _chunk_normals(grid, seed + 1, lo // CHUNK, cnt)
        u, _ = solution_batch(base, Z)
        _, _, Q = malliavin_batch(base, Z)
        hits += int(np.sum((Q < EPS_Q) & (np.abs(u) > 1.0 / m)))
    return SixReport(m, t, x, [float(d) for d in delta_grid], gam, gs, gse, gex, rhs,
                     hits / nsamples, EPS_Q, nsamples, table.as_dict())


# ---------------------------------------------------------------------------
# partition approximant

def sample_field(model: CovarianceModel, grid: GridSpec, N: int, times: Sequence[float],
                 points: Sequence[float], nsamples: int, seed: int,
                 q: int = SUBPOINTS) -> np.ndarray:
    """Joint samples of ``u_N`` (``N <= 2``) on a lattice of targets.

    Works with the increments ``W = A zeta`` directly: ``I_1 = <F_1, W>`` and
    ``I_2 = W^T F_2 W - sum_a (A^T F_2 A)_aa zeta_a^2``, which equals the
    diagonal-free contraction in the coordinates ``zeta``.  The order-2 averages are shared by all targets
    through the sub-point weights, so thousands of targets cost one matrix
    product.  Returns shape ``(nsamples, len(times), len(points))``.
    """
    if not 0 <= N <= 2:
        raise ValueError("field sampling supports N <= 2")
    ts = np.asarray(times, dtype=float)
    xs = np.asarray(points, dtype=float)
    Tt, Tx = np.meshgrid(ts, xs, indexing="ij")
    Tt, Tx = Tt.ravel(), Tx.ravel()
    if np.any(Tt <= 0) or np.any(Tt > grid.T + 1e-12) or np.any(np.abs(Tx) + Tt > grid.L + 1e-12):
        raise GridError("target backward cones must lie inside the grid")
    cov = factorize(cell_covariance(model, grid))
    m = grid.cells
    Z = standard_normals(seed, nsamples, (grid.nt, grid.nx))
    W = cov.apply_factor(Z).reshape(nsamples, m)
    u = np.ones((nsamples, Tt.size))
    if N >= 1:
        te, xe = grid.time_edges(), grid.space_edges()
        area = cone_cell_area(te[None, :-1, None], te[None, 1:, None], xe[None, None, :-1],
                              xe[None, None, 1:], Tt[:, None, None], Tx[:, None, None])
        u += W @ (0.5 * area / (grid.dt * grid.dx)).reshape(-1, m).T
    if N >= 2:
        lat = _Lattice(grid, q)
        Q = q * q
        B = lat.spread(lat.table()).reshape(m, m, Q)
        pt = (grid.time_edges()[:-1, None, None, None] + lat.off_t[None, None, :, None])
        px = (grid.space_edges()[None, :-1, None, None] + lat.off_x[None, None, None, :])
        GT = _g_lattice(Tt[:, None, None, None, None] - pt[None],
                        Tx[:, None, None, None, None] - px[None]).reshape(Tt.size, m * Q)
        A = np.kron(cov.L_time, cov.L_space)
        V = (np.einsum("sa,abk->sbk", W, B) * W[:, :, None]).reshape(nsamples, m * Q)
        diag = np.einsum("ca,cbk,ba->abk", A, B, A).reshape(m, m * Q)
        V -= (Z.reshape(nsamples, m) ** 2) @ diag
        u += V @ GT.T / Q
    return u.reshape(nsamples, ts.size, xs.size)


@dataclass
class ApproximantReport:
    m: int
    block: int
    exceedance: float
    worst_point: float
    threshold: float


def partition_approximant(field: np.ndarray, m: int) -> tuple[np.ndarray, ApproximantReport]:
    """Piecewise-constant approximant ``X_m`` built from sampled fields.

    Blocks of ``b x b`` lattice points share the value at their first point.
    ``b`` is the largest power of two for which every point satisfies
    ``P(|X(anchor) - X(p)| > 2^-m) <= 2^-m`` empirically, which is the
    stochastic-continuity choice of the partition; ``b = 1`` reproduces ``X``.
    """
    X = np.asarray(field, dtype=float)
    if X.ndim == 2:
        X = X[None]
    S, P1, P2 = X.shape
    eps = 2.0**-m

    def build(b: int) -> np.ndarray:
        it = (np.arange(P1) // b) * b
        ix = (np.arange(P2) // b) * b
        return X[:, it][:, :, ix]

    best = 1
    b = 2
    while b <= max(P1, P2):
        Xm = build(b)
        per_point = np.mean(np.abs(Xm - X) > eps, axis=0)
        if per_point.max() <= eps:
            best = b
            b *= 2
        else:
            break
    Xm = build(best)
    exc = np.abs(Xm - X) > eps
    return Xm, ApproximantReport(m, best, float(exc.mean()), float(exc.mean(axis=0).max()), eps)
