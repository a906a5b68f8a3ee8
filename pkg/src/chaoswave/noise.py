"""Exact-in-law synthesis of cell-integrated noise on a space-time grid.

The covariance of the increments ``W(cell_i)`` factorizes as a Kronecker
product of a temporal and a spatial matrix, so samples are drawn as
``L_time @ Z @ L_space.T`` without ever building the full covariance.
"""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular, toeplitz

from .model import CovarianceModel, second_primitive

__all__ = [
    "GridError",
    "NotPositiveSemidefinite",
    "GridSpec",
    "CellCovariance",
    "NoiseSample",
    "temporal_cell_cov",
    "spatial_cell_cov",
    "cell_covariance",
    "factorize",
    "standard_normals",
    "sample",
    "sample_increments",
    "write_samples",
    "read_samples",
    "CovarianceCheck",
    "covariance_check",
]

MAX_CELLS = 100_000
PSD_TOL = 1e-10
CHUNK = 4096
MAGIC = b"CWNS"
DUMP_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")


class GridError(ValueError):
    """Invalid grid specification."""


class NotPositiveSemidefinite(np.linalg.LinAlgError):
    """Negative eigenvalues beyond the clipping tolerance."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on ``[0, T] x [-L, L]`` with ``nt x nx`` cells."""

    T: float = 1.0
    L: float = 1.0
    nt: int = 16
    nx: int = 16

    def __post_init__(self):
        if not (self.T > 0 and self.L > 0):
            raise GridError("T and L must be positive")
        if int(self.nt) != self.nt or int(self.nx) != self.nx or self.nt < 1 or self.nx < 1:
            raise GridError("nt and nx must be positive integers")
        if self.nt * self.nx > MAX_CELLS:
            raise GridError(f"grid has {self.nt * self.nx} cells, budget is {MAX_CELLS}")

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.nx

    @property
    def cells(self) -> int:
        return self.nt * self.nx

    def time_edges(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    def space_edges(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.nx + 1)

    def time_centers(self) -> np.ndarray:
        return (np.arange(self.nt) + 0.5) * self.dt

    def space_centers(self) -> np.ndarray:
        return -self.L + (np.arange(self.nx) + 0.5) * self.dx


@dataclass(frozen=True)
class CellCovariance:
    C_time: np.ndarray
    C_space: np.ndarray
    L_time: np.ndarray | None = None
    L_space: np.ndarray | None = None
    Linv_time: np.ndarray | None = None
    Linv_space: np.ndarray | None = None
    psd_slack: float = 0.0

    @property
    def factorized(self) -> bool:
        return self.L_time is not None and self.L_space is not None

    def full(self) -> np.ndarray:
        """Dense covariance of the row-major flattened increments (small grids only)."""
        return np.kron(self.C_time, self.C_space)

    def apply_factor(self, Z: np.ndarray) -> np.ndarray:
        """``(L_time kron L_space) vec(Z)`` for a batch ``Z`` of shape ``(..., nt, nx)``."""
        return self.L_time @ Z @ self.L_space.T

    def apply_factor_T(self, Y: np.ndarray) -> np.ndarray:
        """Transpose factor applied to ``(..., nt, nx)`` arrays."""
        return self.L_time.T @ Y @ self.L_space

    def solve_factor_T(self, Y: np.ndarray) -> np.ndarray:
        """Inverse of the transpose factor (pseudo-inverse when a factor was clipped)."""
        return self.Linv_time.T @ Y @ self.Linv_space


@dataclass(frozen=True)
class NoiseSample:
    zeta: np.ndarray
    increments: np.ndarray
    seed: int
    index: int


def _toeplitz_from_profile(profile) -> np.ndarray:
    return toeplitz(np.asarray(profile, dtype=float))


def temporal_cell_cov(model: CovarianceModel, grid: GridSpec) -> np.ndarray:
    """``C[i, j] = int_{cell i} int_{cell j} gamma(s - t) ds dt`` from fBm second differences."""
    k = np.arange(grid.nt, dtype=float)
    H2 = 2.0 * model.hurst
    profile = 0.5 * (np.abs(k + 1) ** H2 + np.abs(k - 1) ** H2 - 2.0 * k ** H2)
    return _toeplitz_from_profile(grid.dt ** H2 * profile)


def spatial_cell_cov(model: CovarianceModel, grid: GridSpec) -> np.ndarray:
    """Cell pairings of the spatial covariance (``dx`` on the diagonal in white mode)."""
    if model.white:
        return grid.dx * np.eye(grid.nx)
    a = model.riesz_alpha
    k = np.arange(grid.nx, dtype=float)
    profile = (second_primitive(k + 1, a) + second_primitive(k - 1, a)
               - 2.0 * second_primitive(k, a))
    return _toeplitz_from_profile(grid.dx ** (a + 1) * profile)


def cell_covariance(model: CovarianceModel, grid: GridSpec) -> CellCovariance:
    return CellCovariance(temporal_cell_cov(model, grid), spatial_cell_cov(model, grid))


def _sqrt_factor(C: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    C = 0.5 * (C + C.T)
    try:
        L = np.linalg.cholesky(C)
        return L, solve_triangular(L, np.eye(len(C)), lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    w, V = np.linalg.eigh(C)
    floor = -PSD_TOL * float(np.trace(C))
    if w.min() < floor:
        raise NotPositiveSemidefinite(
            f"not positive semidefinite: eigenvalue {w.min():.3e} below {floor:.3e}")
    slack = float(max(0.0, -w.min()))
    F = V * np.sqrt(np.clip(w, 0.0, None))
    return F, np.linalg.pinv(F), slack


def factorize(cov: CellCovariance) -> CellCovariance:
    """Square-root factors with eigenvalue clipping as the fallback."""
    Lt, It, st = _sqrt_factor(cov.C_time)
    Ls, Is, ss = _sqrt_factor(cov.C_space)
    return replace(cov, L_time=Lt, L_space=Ls, Linv_time=It, Linv_space=Is,
                   psd_slack=max(st, ss))


def _chunk_rng(seed: int, chunk: int) -> np.random.Generator:
    key = np.array([seed % 2**64, chunk], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def standard_normals(seed: int, count: int, shape: tuple[int, ...], threads: int = 1) -> np.ndarray:
    """``count`` i.i.d. standard normal arrays of ``shape``.

    Samples are produced in fixed chunks of ``CHUNK`` with a counter-based
    generator keyed by ``(seed, chunk)``, so the output does not depend on
    ``threads`` and any prefix of a longer run is reproduced exactly.
    """
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    out = np.empty((count,) + tuple(shape))
    nchunks = -(-count // CHUNK)

    def fill(c: int) -> None:
        lo, hi = c * CHUNK, min(count, (c + 1) * CHUNK)
        out[lo:hi] = _chunk_rng(seed, c).standard_normal((hi - lo,) + tuple(shape))

    if threads > 1 and nchunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(nchunks)))
    else:
        for c in range(nchunks):
            fill(c)
    return out


def sample_increments(grid: GridSpec, cov: CellCovariance, seed: int, count: int,
                      threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of :func:`sample` returning ``(zeta, increments)`` arrays."""
    if not cov.factorized:
        raise ValueError("covariance must be factorized first")
    zeta = standard_normals(seed, count, (grid.nt, grid.nx), threads)
    return zeta, cov.apply_factor(zeta)


def sample(grid: GridSpec, cov: CellCovariance, seed: int, count: int,
           threads: int = 1) -> list[NoiseSample]:
    zeta, inc = sample_increments(grid, cov, seed, count, threads)
    return [NoiseSample(zeta[i], inc[i], seed, i) for i in range(count)]


@dataclass(frozen=True)
class CovarianceCheck:
    count: int
    max_abs_z: float
    max_abs_error: float
    mean_abs_z: float

    def passed(self, z: float = 4.0) -> bool:
        return self.max_abs_z <= z

    def as_dict(self) -> dict:
        return {"count": self.count, "max_abs_z": self.max_abs_z,
                "max_abs_error": self.max_abs_error, "mean_abs_z": self.mean_abs_z}


def covariance_check(grid: GridSpec, cov: CellCovariance, seed: int, count: int,
                     threads: int = 1) -> CovarianceCheck:
    """Entrywise z-scores of the empirical increment covariance against ``C_time (x) C_space``.

    The mean is known to be zero, so each entry is a plain average of
    products and its standard error is the sample deviation of those products.
    """
    if count < 2:
        raise ValueError("count must be at least 2")
    m = grid.cells
    target = cov.full()
    S1 = np.zeros((m, m))
    S2 = np.zeros((m, m))
    for lo in range(0, count, CHUNK):
        hi = min(count, lo + CHUNK)
        z = _chunk_rng(seed, lo // CHUNK).standard_normal((hi - lo, grid.nt, grid.nx))
        X = cov.apply_factor(z).reshape(hi - lo, m)
        S1 += X.T @ X
        S2 += (X * X).T @ (X * X)
    mean = S1 / count
    var = (S2 / count - mean**2) * count / (count - 1)
    se = np.sqrt(np.clip(var, 1e-300, None) / count)
    z = (mean - target) / se
    return CovarianceCheck(count, float(np.max(np.abs(z))), float(np.max(np.abs(mean - target))),
                           float(np.mean(np.abs(z))))


def write_samples(path, increments: np.ndarray) -> None:
    """Binary dump: 32-byte header then little-endian float64 in row-major order."""
    inc = np.ascontiguousarray(increments, dtype="<f8")
    count, nt, nx = inc.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, DUMP_VERSION, nt, nx, count))
        fh.write(inc.tobytes(order="C"))


def read_samples(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, version, nt, nx, count = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC or version != DUMP_VERSION:
            raise ValueError("not a noise dump")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != count * nt * nx:
        raise ValueError("truncated noise dump")
    return data.reshape(count, nt, nx).astype(float)
