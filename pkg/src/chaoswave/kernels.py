"""Chaos kernels of the solution and the moment quantities built from them.

``f_n`` is the product of Green functions along the chain
``(t_1, x_1) -> ... -> (t_n, x_n) -> (t, x)``.  The squared norms
``alpha_n(t) = (n!)^2 ||f~_n||^2`` are computed from the physical form of
the spatial pairing ``psi_n(t, s)`` of two chains: the spatial variables are
integrated exactly or by a one-dimensional quadrature in the separation ``w``,
and the time variables by a product rule after removing the singularity of
``gamma`` with the substitution ``v = sign(h)|h|^(2H-1)``, ``gamma(h) dh = H dv``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import integrate
from scipy.optimize import minimize_scalar
from scipy.special import roots_legendre
from scipy.stats import qmc

from .model import (QUAD_LIMIT, CovarianceModel, K_M, WaveKernel, big_gamma, c0,
                    first_primitive, second_primitive)

__all__ = [
    "AlphaEstimate",
    "AlphaReport",
    "MalliavinBoundReport",
    "ConstantsTable",
    "ChaosKernelSet",
    "ScanExhausted",
    "f_n_eval",
    "f_tilde_eval",
    "psi",
    "psi0",
    "psi0_closed",
    "phi",
    "g_pairing",
    "psi1_spectral",
    "psi2_physical",
    "alpha_1_closed",
    "alpha_estimate",
    "alpha_n",
    "alpha_bound",
    "alpha_bound_check",
    "second_moment_series",
    "scan_M",
    "d_norm_constant",
    "d2_norm_constant",
    "d_norm_order2",
    "constants_table",
]

QMC_POINTS = 2**14
QMC_REPLICATES = 8
QMC_SEED = 20240611
ALPHA2_NODES = 12
M_SCAN_MAX = 2.0**20
W_NODES = 24


class ScanExhausted(RuntimeError):
    """No admissible rate M below the scan limit."""


# ---------------------------------------------------------------------------
# kernels f_n

def f_n_eval(n: int, args: Sequence[tuple[float, float]], t: float, x: float) -> float:
    """``prod_k G(t_{k+1} - t_k, x_{k+1} - x_k)`` on the simplex ``0 < t_1 < ... < t_n < t``."""
    if n < 1 or len(args) != n:
        raise ValueError("need n >= 1 argument pairs")
    pts = list(args) + [(t, x)]
    if pts[0][0] <= 0:
        return 0.0
    val = 1.0
    for (s0, y0), (s1, y1) in zip(pts[:-1], pts[1:]):
        if not s0 < s1:
            return 0.0
        val *= float(WaveKernel.G(s1 - s0, y1 - y0))
        if val == 0.0:
            return 0.0
    return val


def f_tilde_eval(n: int, args: Sequence[tuple[float, float]], t: float, x: float) -> float:
    """Symmetrization of ``f_n`` over the ``n`` argument pairs."""
    perms = itertools.permutations(args)
    return sum(f_n_eval(n, p, t, x) for p in perms) / math.factorial(n)


@dataclass(frozen=True)
class ChaosKernelSet:
    """Kernels of order ``n`` for the target point ``(t, x)``."""

    n: int
    t: float
    x: float = 0.0

    def f(self, args) -> float:
        return f_n_eval(self.n, args, self.t, self.x)

    def f_tilde(self, args) -> float:
        return f_tilde_eval(self.n, args, self.t, self.x)

    def f_j(self, j: int, args, r: float, z: float) -> float:
        """``f_n`` with ``(r, z)`` inserted at position ``j`` (1-based) among ``n - 1`` pairs."""
        if not 1 <= j <= self.n or len(args) != self.n - 1:
            raise ValueError("j must lie in 1..n and args must have n-1 pairs")
        full = list(args[: j - 1]) + [(r, z)] + list(args[j - 1:])
        return f_n_eval(self.n, full, self.t, self.x)

    def h_j(self, j: int, args, r: float, z: float) -> float:
        """Symmetrization of :meth:`f_j` over the remaining ``n - 1`` pairs."""
        perms = list(itertools.permutations(args))
        return sum(self.f_j(j, p, r, z) for p in perms) / len(perms)

    def tilde_sum_defect(self, args, r: float, z: float) -> float:
        """``|f~_n(., r, z) - (1/n) sum_j h_j|`` at one argument tuple."""
        lhs = self.f_tilde(list(args) + [(r, z)])
        rhs = sum(self.h_j(j, args, r, z) for j in range(1, self.n + 1)) / self.n
        return abs(lhs - rhs)

    def upper_bound(self) -> float:
        return 2.0 ** (-self.n)


# ---------------------------------------------------------------------------
# quadrature helpers

def _gl01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _graded01(n: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss rule on [0, 1] pushed through a sigmoidal map of order ``p``."""
    x, w = _gl01(n)
    if p == 1:
        return x, w
    a, b = x**p, (1 - x) ** p
    y = a / (a + b)
    dy = p * (x ** (p - 1) * b + a * (1 - x) ** (p - 1)) / (a + b) ** 2
    return y, w * dy


def _pieces(lo, hi, cuts, rule) -> tuple[np.ndarray, np.ndarray]:
    """Composite rule on ``[lo, hi]`` (arrays of shape (P,)) split at ``cuts``."""
    x, w = rule
    pts = np.stack([lo] + [np.clip(c, lo, hi) for c in cuts] + [hi], -1)
    pts = np.sort(pts, -1)
    a, b = pts[:, :-1, None], pts[:, 1:, None]
    return (a + (b - a) * x).reshape(len(lo), -1), ((b - a) * w).reshape(len(lo), -1)


def _lag_rule(model: CovarianceModel, ti: np.ndarray, t: float, cuts, rule):
    """Nodes ``s`` and weights for ``int_0^t gamma(ti - s) F(s) ds``.

    ``cuts`` are points in ``s`` where ``F`` has kinks.
    """
    b = 2 * model.hurst - 1
    to_v = lambda c: np.sign(c - ti) * np.abs(c - ti) ** b
    v, wv = _pieces(-ti**b, (t - ti) ** b, [np.zeros_like(ti)] + [to_v(c) for c in cuts], rule)
    s = ti[:, None] + np.sign(v) * np.abs(v) ** (1.0 / b)
    return s, model.hurst * wv


def _w_integral(fn, bps: np.ndarray, nodes: int = W_NODES) -> np.ndarray:
    """``int_0^{max bps} fn(w) dw`` for a batch; ``bps`` has shape (P, k), first column 0.

    Panels between consecutive breakpoints use a graded rule that absorbs the
    integrable singularity at ``w = 0`` and the kinks at the breakpoints.
    """
    bp = np.sort(bps, -1)
    y, wy = _graded01(nodes, 3)
    lo, hi = bp[:, :-1, None], bp[:, 1:, None]
    w = lo + (hi - lo) * y
    return np.sum(fn(w) * (hi - lo) * wy, axis=(-1, -2))


def _omega(A, B, w):
    """Length of ``(-A, A) intersect (w - B, w + B)``."""
    return np.clip(np.minimum(A, w + B) - np.maximum(-A, w - B), 0.0, None)


# ---------------------------------------------------------------------------
# closed forms and one-dimensional quantities

def psi(t: float) -> float:
    """``int_0^t int G(r, z)^2 dz dr = t^2 / 4``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return t * t / 4.0


def g_pairing(model: CovarianceModel, a, b):
    """``<G(a), G(b)>_0``, vectorized."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if model.white:
        return 0.5 * np.minimum(a, b)
    al = model.riesz_alpha
    return 0.5 * (second_primitive(a + b, al) - second_primitive(a - b, al))


def psi1_spectral(model: CovarianceModel, a: float, b: float) -> float:
    """``int FG(a) FG(b) mu(d xi)`` by quadrature (dual of :func:`g_pairing`)."""
    al = 0.0 if model.white else model.riesz_alpha
    const = 1.0 if model.white else model.riesz_constant
    split = 40.0
    body = lambda x: math.sin(a * x) * math.sin(b * x) / (x * x)
    if model.white:
        head = integrate.quad(body, 0.0, split, limit=QUAD_LIMIT, epsabs=1e-13, epsrel=1e-12)[0]
    else:
        head = integrate.quad(lambda x: body(x) if x > 0 else a * b, 0.0, split, weight="alg",
                              wvar=(-al, 0.0), limit=QUAD_LIMIT, epsabs=1e-13, epsrel=1e-12)[0]
    # sin(a x) sin(b x) = (cos((a-b)x) - cos((a+b)x)) / 2 against x^(-2-al)
    tail = 0.0
    for freq, sgn in ((a - b, 0.5), (a + b, -0.5)):
        if abs(freq) < 1e-14:
            tail += sgn * split ** (-1.0 - al) / (1.0 + al)
        else:
            tail += sgn * integrate.quad(lambda x: x ** (-2.0 - al), split, math.inf,
                                         weight="cos", wvar=abs(freq), limlst=200,
                                         epsabs=1e-13)[0]
    return const * (head + tail) / math.pi


def psi0_closed(model: CovarianceModel, t: float) -> float:
    """``int_0^t <G(r), G(r)>_0 dr`` in closed form."""
    if model.white:
        return t * t / 4.0
    a = model.riesz_alpha
    return 2.0**a * t ** (a + 2) / (a * (a + 1) * (a + 2))


def psi0(model: CovarianceModel, t: float) -> float:
    """``int_0^t int |FG(r)(xi)|^2 mu(d xi) dr`` by spectral quadrature.

    The ``r`` integral is done inside: ``int_0^t sin^2(r xi) dr = t/2 - sin(2 t xi)/(4 xi)``.
    """
    if t <= 0:
        if t == 0:
            return 0.0
        raise ValueError("t must be positive")
    al = 0.0 if model.white else model.riesz_alpha
    const = 1.0 if model.white else model.riesz_constant

    def inner(x):
        if x * t < 1e-3:
            # series of (t/2 - sin(2tx)/(4x)) / x^2 = t^3/3 - t^5 x^2/15 + ...
            return t**3 / 3 - t**5 * x * x / 15 + 2 * t**7 * x**4 / 315
        return (t / 2 - math.sin(2 * t * x) / (4 * x)) / (x * x)

    split = 40.0 / t
    kw = dict(limit=QUAD_LIMIT, epsabs=1e-13, epsrel=1e-12)
    if model.white:
        head = integrate.quad(inner, 0.0, split, **kw)[0]
    else:
        head = integrate.quad(inner, 0.0, split, weight="alg", wvar=(-al, 0.0), **kw)[0]
    smooth = t / 2 * split ** (-1.0 - al) / (1.0 + al)
    osc = integrate.quad(lambda x: -x ** (-3.0 - al) / 4, split, math.inf, weight="sin",
                         wvar=2 * t, limlst=200, epsabs=1e-15)[0]
    return const * (head + smooth + osc) / math.pi


def phi(model: CovarianceModel, t: float, nodes: int = 48) -> float:
    """``int_0^t int_0^t gamma(s - s') <G(s), G(s')>_0 ds ds'`` by a product rule."""
    if t <= 0:
        return 0.0
    x, w = _graded01(nodes, 2)
    s = t * x
    sp, wsp = _lag_rule(model, s, t, [], _graded01(nodes, 1))
    vals = g_pairing(model, s[:, None], sp)
    return float(np.sum(t * w[:, None] * wsp * vals))


def alpha_1_closed(model: CovarianceModel, t: float) -> float:
    """``alpha_1(t)`` reduced to one regular integral."""
    if t <= 0:
        return 0.0
    H = model.hurst
    if model.white:
        return t ** (2 * H + 1) / (2 * (2 * H + 1))
    a = model.riesz_alpha
    b = 2 * H - 2
    k = 2 * H + a - 1
    # unit square; (a+b)^(alpha+1) part in sum/difference coordinates
    edge = integrate.quad(lambda s: s ** (a + 1), 1.0, 2.0, weight="alg", wvar=(0.0, b + 1),
                          epsabs=1e-14, epsrel=1e-13)[0]
    plus = (1.0 / (a + b + 3) + edge) / (b + 1)
    minus = 2.0 / ((k + 1) * (k + 2))
    unit = H * (2 * H - 1) * 0.5 * (plus - minus) / (a * (a + 1))
    return unit * t ** (2 * H + a + 1)


# ---------------------------------------------------------------------------
# psi_2 in physical form

def psi2_physical(model: CovarianceModel, A, B, C, D, same) -> np.ndarray:
    """Pairing of two second-order chains from their link lengths.

    ``A, C`` are the lengths ``t - t_(2), t_(2) - t_(1)`` of the first chain and
    ``B, D`` those of the second; ``same`` tells whether both chains visit their
    spatial points in the same order.
    """
    A, B, C, D = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (A, B, C, D))
    same = np.atleast_1d(np.asarray(same, dtype=bool))
    if model.white:
        m = np.minimum(C, D)
        cross = _white_cross(A, B, m)
        return np.where(same, 4 * np.minimum(A, B) * m, cross) / 16.0
    al = model.riesz_alpha
    P = lambda u: second_primitive(u, al)
    P1 = lambda u: first_primitive(u, al)
    top = A + B
    bps = np.stack([np.zeros_like(A), np.abs(A - B), top, np.minimum(C + D, top),
                    np.minimum(np.abs(C - D), top), np.minimum(C, top), np.minimum(D, top)], -1)
    An, Bn, Cn, Dn = (v[:, None, None] for v in (A, B, C, D))
    sn = same[:, None, None]

    def integrand(w):
        om = _omega(An, Bn, w)
        with np.errstate(divide="ignore", invalid="ignore"):
            fw = np.where(w > 0, w ** (al - 1.0), 0.0)
        q = P(w + Cn + Dn) + P(w - Cn - Dn) - P(w + Cn - Dn) - P(w - Cn + Dn)
        lam = (P1(w + Cn) - P1(w - Cn)) * (P1(w + Dn) - P1(w - Dn))
        return om * np.where(sn, fw * q, lam)

    return 2.0 * _w_integral(integrand, bps) / 16.0


def _white_cross(A, B, m):
    """``int_{-m}^{m} omega_{A,B}(w) dw`` in closed form."""
    lo, hi = np.abs(A - B), A + B
    m = np.minimum(m, hi)
    flat = 2 * np.minimum(A, B) * np.minimum(m, lo)
    # omega decreases linearly from 2 min(A,B) at lo to 0 at hi
    u = np.clip(m, lo, hi)
    ramp = (hi - lo) * (hi - lo) / 2 - (hi - u) ** 2 / 2
    return 2 * (flat + ramp)


def _alpha2_deterministic(model: CovarianceModel, t: float, nodes: int) -> float:
    """Product rule over the ordered times ``t1 < t2`` with every ordering switch as a panel edge."""
    rule = _graded01(nodes, 2)
    x, w = rule
    t1 = t * x
    w1 = t * w
    t2, w2 = _pieces(t1, np.full_like(t1, t), [], rule)
    k = t2.shape[1]
    t1 = np.repeat(t1, k)
    W = np.repeat(w1, k) * w2.ravel()
    t2 = t2.ravel()
    # s1 switches order relative to t2 (|A - B| kink)
    s1, ws1 = _lag_rule(model, t1, t, [t2], rule)
    k = s1.shape[1]
    t1, t2, W = np.repeat(t1, k), np.repeat(t2, k), np.repeat(W, k) * ws1.ravel()
    s1 = s1.ravel()
    # s2 switches order relative to s1
    s2, ws2 = _lag_rule(model, t2, t, [s1], rule)
    k = s2.shape[1]
    t1, t2, s1, W = (np.repeat(v, k) for v in (t1, t2, s1, W))
    W = W * ws2.ravel()
    s2 = s2.ravel()
    same = s1 < s2
    A, C = t - t2, t2 - t1
    B = np.where(same, t - s2, t - s1)
    D = np.abs(s2 - s1)
    total = 0.0
    step = 40_000
    for lo in range(0, A.size, step):
        sl = slice(lo, lo + step)
        total += float(np.sum(W[sl] * psi2_physical(model, A[sl], B[sl], C[sl], D[sl], same[sl])))
    # the region t2 < t1 contributes the same by relabeling both chains
    return 2.0 * total


# ---------------------------------------------------------------------------
# randomized quasi-Monte Carlo for any order

def _alpha_qmc_batch(model: CovarianceModel, n: int, t: float, U: np.ndarray) -> np.ndarray:
    """Integrand values of the unbiased estimator at the points ``U`` of ``[0,1)^(4n-1)``.

    Times are drawn per pair ``(t_i, s_i)`` through the lag substitution.  The
    first chain's points are drawn uniformly inside their light cones.  The
    second chain is then drawn link by link from the exact conditional law
    with density ``|y - x_i|^(alpha - 1)`` restricted to its cone, so every
    factor of the weight is a bounded interval mass.
    """
    H = model.hurst
    b = 2 * H - 1
    N = len(U)
    ti = t * U[:, :n]
    lo, hi = -ti**b, (t - ti) ** b
    v = lo + (hi - lo) * U[:, n:2 * n]
    si = ti + np.sign(v) * np.abs(v) ** (1.0 / b)
    wt = np.prod(t * H * (hi - lo), axis=1) * 4.0 ** (-n)
    order = np.argsort(ti, axis=1)
    ti = np.take_along_axis(ti, order, 1)
    si = np.take_along_axis(si, order, 1)
    sig = np.argsort(si, axis=1)
    ss = np.take_along_axis(si, sig, 1)
    end = np.full((N, 1), t)
    u = np.diff(np.concatenate([ti, end], 1), axis=1)
    vv = np.diff(np.concatenate([ss, end], 1), axis=1)
    col = 2 * n
    X = np.zeros((N, n))
    prev = np.zeros(N)
    for k in range(n - 1, -1, -1):
        X[:, k] = prev + u[:, k] * (2.0 * U[:, col] - 1.0)
        col += 1
        prev = X[:, k]
        wt = wt * 2.0 * u[:, k]
    prev = np.zeros(N)
    if model.white:
        # y_i = x_i: the second chain's cone constraints become interval tests
        for k in range(n - 1, -1, -1):
            c = np.take_along_axis(X, sig[:, k:k + 1], 1)[:, 0]
            wt = wt * (np.abs(c - prev) < vv[:, k])
            prev = c
        return wt
    al = model.riesz_alpha
    F = lambda z: first_primitive(z, al)
    Finv = lambda z: np.sign(z) * np.abs(al * z) ** (1.0 / al)
    for k in range(n - 1, -1, -1):
        c = np.take_along_axis(X, sig[:, k:k + 1], 1)[:, 0]
        Fa, Fb = F(prev - vv[:, k] - c), F(prev + vv[:, k] - c)
        wt = wt * (Fb - Fa)
        if k > 0:
            prev = c + Finv(Fa + (Fb - Fa) * U[:, col])
            col += 1
    return wt


def _alpha_qmc_white(model: CovarianceModel, n: int, t: float, U: np.ndarray) -> np.ndarray:
    """White-mode estimator with the last-link constraints integrated out exactly.

    With ``y_i = x_i`` the weight is the volume of a polytope in the partial
    sums ``E_j = x_j``; sampling ``E_n, ..., E_1`` in turn from the intersection
    of their admissible intervals keeps the integrand continuous.
    """
    H = model.hurst
    b = 2 * H - 1
    N = len(U)
    ti = t * U[:, :n]
    lo, hi = -ti**b, (t - ti) ** b
    v = lo + (hi - lo) * U[:, n:2 * n]
    si = ti + np.sign(v) * np.abs(v) ** (1.0 / b)
    wt = np.prod(t * H * (hi - lo), axis=1) * 4.0 ** (-n)
    order = np.argsort(ti, axis=1)
    ti = np.take_along_axis(ti, order, 1)
    si = np.take_along_axis(si, order, 1)
    sig = np.argsort(si, axis=1)
    ss = np.take_along_axis(si, sig, 1)
    end = np.full((N, 1), t)
    u = np.diff(np.concatenate([ti, end], 1), axis=1)
    vv = np.diff(np.concatenate([ss, end], 1), axis=1)
    # positions of both chains coincide: E[:, j] is the common point of pair j
    E = np.zeros((N, n + 1))
    sigx = np.concatenate([sig, np.full((N, 1), n)], 1)
    col = 2 * n
    for j in range(n - 1, -1, -1):
        a, bnd = E[:, j + 1] - u[:, j], E[:, j + 1] + u[:, j]
        for k in range(n):
            p, q = sigx[:, k], sigx[:, k + 1]
            act = np.minimum(p, q) == j
            other = np.where(p == j, q, p)
            c = np.take_along_axis(E, other[:, None], 1)[:, 0]
            a = np.where(act, np.maximum(a, c - vv[:, k]), a)
            bnd = np.where(act, np.minimum(bnd, c + vv[:, k]), bnd)
        width = np.clip(bnd - a, 0.0, None)
        wt = wt * width
        if j > 0:
            E[:, j] = a + width * U[:, col]
            col += 1
    return wt


@dataclass(frozen=True)
class AlphaEstimate:
    n: int
    t: float
    value: float
    stderr: float
    method: str
    points: int = 0
    replicates: int = 1

    @property
    def rel_stderr(self) -> float:
        return self.stderr / self.value if self.value > 0 else 0.0


def _qmc(model: CovarianceModel, n: int, t: float, points: int, replicates: int,
         seed: int) -> AlphaEstimate:
    m = int(round(math.log2(points)))
    if 2**m != points:
        raise ValueError("points must be a power of two")
    dim = 4 * n - 1 if not model.white else 3 * n - 1
    est = np.empty(replicates)
    for r in range(replicates):
        U = qmc.Sobol(dim, scramble=True, seed=np.random.default_rng([seed, n, r])).random_base2(m)
        batch = _alpha_qmc_white if model.white else _alpha_qmc_batch
        est[r] = np.mean(batch(model, n, t, U))
    se = float(np.std(est, ddof=1) / math.sqrt(replicates)) if replicates > 1 else math.inf
    return AlphaEstimate(n, t, float(np.mean(est)), se, "qmc", points, replicates)


@lru_cache(maxsize=256)
def alpha_estimate(model: CovarianceModel, n: int, t: float, method: str = "auto",
                   nodes: int = ALPHA2_NODES, points: int = QMC_POINTS,
                   replicates: int = QMC_REPLICATES, seed: int = QMC_SEED) -> AlphaEstimate:
    """``alpha_n(t)`` with an error indication.

    ``method`` is ``"closed"`` (n = 1), ``"quadrature"`` (n <= 2), ``"qmc"`` or
    ``"auto"``, which picks the first applicable one in that order.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n == 0:
        return AlphaEstimate(0, t, 1.0, 0.0, "closed")
    if t <= 0:
        return AlphaEstimate(n, t, 0.0, 0.0, "closed")
    if method == "auto":
        method = "closed" if n == 1 else "quadrature" if n == 2 else "qmc"
    if method == "closed":
        if n != 1:
            raise ValueError("closed form only for n = 1")
        return AlphaEstimate(1, t, alpha_1_closed(model, t), 0.0, "closed")
    if method == "quadrature":
        if n == 1:
            return AlphaEstimate(1, t, phi(model, t), 0.0, "quadrature")
        if n == 2:
            return AlphaEstimate(2, t, _alpha2_deterministic(model, t, nodes), 0.0, "quadrature",
                                 nodes)
        raise ValueError("deterministic quadrature only for n <= 2")
    if method == "qmc":
        return _qmc(model, n, t, points, replicates, seed)
    raise ValueError(f"unknown method {method!r}")


def alpha_n(model: CovarianceModel, n: int, t: float, method: str = "auto") -> float:
    """``alpha_n(t) = (n!)^2 ||f~_n(., t, x)||^2`` in the tensor power of the noise space."""
    return alpha_estimate(model, n, float(t), method).value


# ---------------------------------------------------------------------------
# bounds

def alpha_bound(model: CovarianceModel, n: int, t: float, M: float) -> float:
    """``e^(M t) n! (2 Gamma_t K_M / M)^n``."""
    return math.exp(M * t) * math.factorial(n) * (2 * big_gamma(model, t) * K_M(model, M) / M) ** n


@dataclass
class AlphaReport:
    t: float
    values: dict[int, float] = field(default_factory=dict)
    stderr: dict[int, float] = field(default_factory=dict)
    bounds: dict[tuple[int, float], float] = field(default_factory=dict)
    partial_sum: float | None = None
    tail_bound: float | None = None
    best_M: float | None = None
    tightest_M: dict[int, float] = field(default_factory=dict)
    violations: list[tuple[int, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "alpha": {str(k): v for k, v in self.values.items()},
            "stderr": {str(k): v for k, v in self.stderr.items()},
            "bounds": [{"n": n, "M": M, "bound": b} for (n, M), b in self.bounds.items()],
            "partial_sum": self.partial_sum,
            "tail_bound": self.tail_bound,
            "best_M": self.best_M,
            "tightest_M": {str(k): v for k, v in self.tightest_M.items()},
            "violations": [{"n": n, "M": M} for n, M in self.violations],
        }


def alpha_bound_check(model: CovarianceModel, n: int, t: float, M_scan: Sequence[float],
                      report: AlphaReport | None = None) -> AlphaReport:
    """Compare ``alpha_n(t)`` with its exponential bound for every ``M`` in the scan."""
    rep = report if report is not None else AlphaReport(t)
    est = alpha_estimate(model, n, float(t))
    rep.values[n], rep.stderr[n] = est.value, est.stderr
    best = None
    for M in M_scan:
        bnd = alpha_bound(model, n, t, M) if t > 0 else 0.0
        rep.bounds[(n, float(M))] = bnd
        if est.value > bnd * (1 + 1e-12):
            rep.violations.append((n, float(M)))
        if best is None or bnd < rep.bounds[(n, best)]:
            best = float(M)
    rep.tightest_M[n] = best
    return rep


def _tail(model: CovarianceModel, t: float, N: int, M: float) -> float:
    q = 2 * big_gamma(model, t) * K_M(model, M) / M
    if q >= 1:
        return math.inf
    return math.exp(M * t) * q ** (N + 1) / (1 - q)


def second_moment_series(model: CovarianceModel, t: float, N: int) -> AlphaReport:
    """Partial sum ``sum_{n<=N} alpha_n / n!`` and the geometric bound on the rest."""
    if not 0 <= N <= 3:
        raise ValueError("N must lie in 0..3")
    rep = AlphaReport(t)
    total = 1.0
    for n in range(1, N + 1):
        est = alpha_estimate(model, n, float(t))
        rep.values[n], rep.stderr[n] = est.value, est.stderr
        total += est.value / math.factorial(n)
    rep.partial_sum = total
    if t <= 0:
        rep.tail_bound, rep.best_M = 0.0, None
        return rep
    grid = np.geomspace(0.5, 400.0, 120)
    tails = [_tail(model, t, N, M) for M in grid]
    i = int(np.argmin(tails))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda M: _tail(model, t, N, M), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-6})
    rep.best_M = float(res.x)
    rep.tail_bound = float(res.fun)
    return rep


# ---------------------------------------------------------------------------
# Malliavin norm constants

def scan_M(model: CovarianceModel, T: float, power: int) -> float:
    """Smallest ``M = 2^k`` (k >= 1) with ``e^power Gamma_T (2/M) K_M < 1/2``."""
    g = big_gamma(model, T)
    M = 2.0
    while M <= M_SCAN_MAX:
        if math.e**power * g * (2.0 / M) * K_M(model, M) < 0.5:
            return M
        M *= 2.0
    raise ScanExhausted("no admissible M up to 2^20")


def _ratio(model: CovarianceModel, T: float, M: float, power: int) -> float:
    return math.e**power * big_gamma(model, T) * (2.0 / M) * K_M(model, M)


def d_norm_order2(model: CovarianceModel, t: float, r: float, nodes: int = 24) -> float:
    """``int E|2 I_1(f~_2(., r, z, t, x))|^2 dz = int ||h_1 + h_2||_H^2 dz`` by quadrature.

    ``h_1`` puts ``(r, z)`` first in the chain, ``h_2`` second.  Integrating
    ``z`` out leaves overlaps of light-cone intervals, handled in closed form
    or by one quadrature in the separation ``w``.
    """
    if not 0 < r < t:
        return 0.0
    rule = _graded01(nodes, 2)
    x, w = rule
    white = model.white
    al = model.riesz_alpha
    P1 = lambda u: first_primitive(u, al)

    def t11(t1, s1):
        a, A, b, B = t1 - r, t - t1, s1 - r, t - s1
        if white:
            return 4 * np.minimum(a, b) * np.minimum(A, B) / 16
        bps = np.stack([np.zeros_like(a), np.abs(a - b), a + b, np.minimum(np.abs(A - B), a + b),
                        np.minimum(A + B, a + b)], -1)
        an, bn, An, Bn = (v[:, None, None] for v in (a, b, A, B))

        def fn(u):
            with np.errstate(divide="ignore"):
                fu = np.where(u > 0, u ** (al - 1.0), 0.0)
            return fu * _omega(an, bn, u) * _omega(An, Bn, u)
        return 2 * _w_integral(fn, bps) / 16

    def t12(t1, s1):
        # t1 > r > s1
        a, A, bb = t1 - r, t - t1, r - s1
        if white:
            return _white_cross(A, np.full_like(A, t - r), np.minimum(a, bb)) / 16
        top = np.minimum(a, A + t - r)
        bps = np.stack([np.zeros_like(a), top, np.minimum(bb, top),
                        np.minimum(np.abs(A - (t - r)), top)], -1)
        an, An, bn = (v[:, None, None] for v in (a, A, bb))

        def fn(u):
            lam = P1(u + bn) - P1(u - bn)
            return np.where(u < an, 1.0, 0.0) * lam * _omega(An, t - r, u)
        return 2 * _w_integral(fn, bps) / 16

    def t22(t1, s1):
        return (t - r) / 2 * g_pairing(model, r - t1, r - s1)

    total = 0.0
    for lo, hi in ((0.0, r), (r, t)):
        t1 = lo + (hi - lo) * x
        w1 = (hi - lo) * w
        s1, ws = _lag_rule(model, t1, t, [np.full_like(t1, r)], rule)
        T1 = np.repeat(t1, s1.shape[1])
        S1 = s1.ravel()
        W = (w1[:, None] * ws).ravel()
        val = np.zeros_like(S1)
        up_t, up_s = T1 > r, S1 > r
        m = up_t & up_s
        val[m] = t11(T1[m], S1[m])
        m = up_t & ~up_s
        val[m] = t12(T1[m], S1[m])
        m = ~up_t & up_s
        val[m] = t12(S1[m], T1[m])
        m = ~up_t & ~up_s
        val[m] = t22(T1[m], S1[m])
        total += float(np.sum(W * val))
    return total


@dataclass
class MalliavinBoundReport:
    T: float
    M_T: float
    C_T: float
    ratio_T: float
    ratio_half_T: float | None
    M_T_prime: float
    C_T_dprime: float
    ratio_T_prime: float
    ratio_half_T_prime: float | None
    C_T_prime: float
    orders: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(o["holds"] for o in self.orders)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def d_norm_constant(model: CovarianceModel, T: float,
                    r_values: Sequence[float] | None = None) -> MalliavinBoundReport:
    """First-derivative constant plus the explicit ``n <= 2`` instances of its proof."""
    rep = _constants_core(model, T)
    t = T
    M = rep.M_T
    g = big_gamma(model, t)
    rs = r_values if r_values is not None else [f * T for f in (0.1, 0.3, 0.5, 0.7, 0.9)]
    for r in rs:
        lhs1 = (t - r) / 2
        bound1 = math.pi * t * math.exp(2 * M * t)
        rep.orders.append({"n": 1, "r": r, "lhs": lhs1, "bound": bound1, "holds": lhs1 <= bound1})
        H1, H2 = psi0_closed(model, t - r), psi0_closed(model, r)
        lhs2 = d_norm_order2(model, t, r)
        mid = math.pi * t * 2 * g * (H1 + H2)
        bound2 = math.pi * t * 4 * g * math.exp(2 * M * t) * (2 / M) * K_M(model, M)
        h_bound = math.exp(2 * M * t) * (2 / M) * K_M(model, M)
        rep.orders.append({"n": 2, "r": r, "lhs": lhs2, "H": [H1, H2], "H_bound": h_bound,
                           "intermediate": mid, "bound": bound2,
                           "holds": lhs2 <= mid <= bound2 and max(H1, H2) <= h_bound})
    return rep


def d2_norm_constant(model: CovarianceModel, T: float,
                     pairs: Sequence[tuple[float, float]] | None = None) -> MalliavinBoundReport:
    """Second-derivative constants plus the ``n = 2`` instance of the proof's bound."""
    rep = _constants_core(model, T)
    t = T
    M = rep.M_T_prime
    prs = pairs if pairs is not None else [(0.2 * T, 0.5 * T), (0.1 * T, 0.9 * T), (0.5 * T, 0.6 * T)]
    for theta, r in prs:
        lo, hi = min(theta, r), max(theta, r)
        lhs = (t - hi) * (hi - lo) / 4 if 0 <= lo < hi < t else 0.0
        bound = 4 * (math.pi * T) ** 2 * math.exp(3 * M * t)
        rep.orders.append({"n": 2, "theta": theta, "r": r, "lhs": lhs, "bound": bound,
                           "holds": lhs <= bound})
    return rep


def _series_n2(q: float) -> float:
    """``sum_{n>=2} (n(n-1))^2 q^(n-2)`` for ``0 <= q < 1``."""
    total, n = 0.0, 2
    while True:
        term = (n * (n - 1)) ** 2 * q ** (n - 2)
        total += term
        if term < 1e-17 * total or n > 10_000:
            return total
        n += 1


@lru_cache(maxsize=64)
def _constants_cached(model: CovarianceModel, T: float) -> tuple:
    M1 = scan_M(model, T, 2)
    M2 = scan_M(model, T, 3)
    C1 = 2 * math.pi * T * math.exp(2 * M1 * T) * math.e**2
    C2 = 2 * math.pi * T * math.exp(2 * M2 * T) * math.e**3
    q = big_gamma(model, T) * (2 / M2) * K_M(model, M2)
    Cp = (math.pi * T) ** 2 * math.exp(3 * M2 * T) * _series_n2(q)
    half = lambda M, p: _ratio(model, T, M / 2, p) if M > 2 else None
    return (M1, C1, _ratio(model, T, M1, 2), half(M1, 2),
            M2, C2, _ratio(model, T, M2, 3), half(M2, 3), Cp)


def _constants_core(model: CovarianceModel, T: float) -> MalliavinBoundReport:
    if T <= 0:
        raise ValueError("T must be positive")
    M1, C1, r1, h1, M2, C2, r2, h2, Cp = _constants_cached(model, float(T))
    return MalliavinBoundReport(T, M1, C1, r1, h1, M2, C2, r2, h2, Cp)


@dataclass(frozen=True)
class ConstantsTable:
    T: float
    big_gamma_T: float
    K_M: float
    c0: float
    M_T: float
    M_T_prime: float
    C_T: float
    C_T_prime: float
    C_T_dprime: float
    C_T_star: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def constants_table(model: CovarianceModel, T: float, C_T_star: float | None = None) -> ConstantsTable:
    core = _constants_core(model, T)
    return ConstantsTable(T, big_gamma(model, T), K_M(model, core.M_T), c0(model), core.M_T,
                          core.M_T_prime, core.C_T, core.C_T_prime, core.C_T_dprime, C_T_star)
