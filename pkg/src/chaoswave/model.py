"""Noise law of the equation and the closed-form scalar primitives built on it.

The temporal covariance is ``gamma(t) = H(2H-1)|t|^(2H-2)`` and the spatial one
is either the Riesz kernel ``f(x) = |x|^(alpha-1)`` or a Dirac mass (``white``
fixture).  Fourier transforms use ``F phi(xi) = int exp(-i xi x) phi(x) dx`` and
spectral measures carry the ``(2 pi)^-1`` factor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special

__all__ = [
    "ModelError",
    "KernelSingularity",
    "QuadratureFailure",
    "CovarianceModel",
    "WaveKernel",
    "riesz_constant",
    "second_primitive",
    "first_primitive",
    "box_pairing",
    "gamma_eval",
    "f_eval",
    "spectral_densities",
    "big_gamma",
    "K_M",
    "c0",
    "I_beta_w",
    "I_beta_w_quad",
    "l2_norm_FG",
    "l2_norm_FG_quad",
]

QUAD_ABS = 1e-9
QUAD_REL = 1e-8
QUAD_LIMIT = 2000


class ModelError(ValueError):
    """Invalid noise parameters."""


class KernelSingularity(ValueError):
    """A singular kernel was asked for its value at the singular point."""


class QuadratureFailure(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


def riesz_constant(beta: float) -> float:
    """Constant ``c`` with ``F(|x|^(beta-1)) = c |xi|^(-beta)`` for ``0 < beta < 1``."""
    return float(2.0**beta * math.sqrt(math.pi) * special.gamma(beta / 2)
                 / special.gamma((1.0 - beta) / 2))


def second_primitive(u, a: float):
    """``P(u) = |u|^(a+1) / (a (a+1))``, so that ``P'' = |u|^(a-1)``."""
    u = np.abs(np.asarray(u, dtype=float))
    return u ** (a + 1.0) / (a * (a + 1.0))


def first_primitive(u, a: float):
    """``P'(u) = sign(u) |u|^a / a``."""
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.abs(u) ** a / a


def box_pairing(x0, x1, y0, y1, a: float):
    """Exact ``int_{x0}^{x1} int_{y0}^{y1} |x - y|^(a-1) dy dx``."""
    return (second_primitive(x1 - y0, a) + second_primitive(x0 - y1, a)
            - second_primitive(x1 - y1, a) - second_primitive(x0 - y0, a))


def _check_quad(res: tuple, what: str) -> float:
    val, err = res[0], res[1]
    if not np.isfinite(val) or err > max(1e3 * QUAD_ABS, 1e-4 * abs(val)):
        raise QuadratureFailure(f"{what}: estimate {val!r} with error {err!r}")
    return float(val)


def _power_weighted(func, a: float, upper: float = math.inf, split: float = 1.0) -> float:
    """``int_0^upper func(x) x^(-a) dx`` with the origin singularity as a weight."""
    lo = integrate.quad(func, 0.0, min(split, upper), weight="alg", wvar=(-a, 0.0),
                        epsabs=QUAD_ABS, epsrel=QUAD_REL, limit=QUAD_LIMIT, full_output=1)
    total = _check_quad(lo, "power-weighted integral near 0")
    if upper > split:
        hi = integrate.quad(lambda x: func(x) * x ** (-a), split, upper,
                            epsabs=QUAD_ABS, epsrel=QUAD_REL, limit=QUAD_LIMIT, full_output=1)
        total += _check_quad(hi, "power-weighted integral tail")
    return total


@lru_cache(maxsize=64)
def _parseval_gaussian(alpha: float) -> tuple[float, float]:
    """Both sides of the energy identity for the standard Gaussian density."""
    # direct: int |w|^(alpha-1) (phi*phi)(w) dw, phi*phi = N(0, 2) density
    conv = lambda w: math.exp(-w * w / 4.0) / math.sqrt(4.0 * math.pi)
    direct = 2.0 * _power_weighted(conv, 1.0 - alpha)
    # spectral side before multiplying by c_alpha: (2 pi)^-1 int |xi|^-alpha exp(-xi^2) dxi
    spectral_unit = 2.0 * _power_weighted(lambda x: math.exp(-x * x), alpha) / (2.0 * math.pi)
    return direct, spectral_unit


@dataclass(frozen=True)
class CovarianceModel:
    """Space-time covariance of the noise.

    Parameters
    ----------
    hurst : float
        Temporal parameter ``H`` in ``(1/2, 1)``.
    riesz_alpha : float
        Spatial parameter ``alpha`` in ``(0, 1)``.  Ignored by the kernels in
        ``white`` mode but still validated.
    spatial_mode : {"riesz", "white"}
        ``white`` replaces ``f`` by a Dirac mass, whose spectral density is 1.
    """

    hurst: float = 0.75
    riesz_alpha: float = 0.5
    spatial_mode: str = "riesz"
    riesz_constant: float = field(init=False)
    time_constant: float = field(init=False)
    parseval_gap: float = field(init=False, repr=False)
    assumption_a_order: int = field(init=False, repr=False)

    def __post_init__(self):
        H, a = float(self.hurst), float(self.riesz_alpha)
        if not (0.5 < H < 1.0) or not math.isfinite(H):
            raise ModelError(f"hurst must lie in (1/2, 1), got {self.hurst!r}")
        if not (0.0 < a < 1.0) or not math.isfinite(a):
            raise ModelError(f"riesz_alpha must lie in (0, 1), got {self.riesz_alpha!r}")
        if self.spatial_mode not in ("riesz", "white"):
            raise ModelError(f"unknown spatial_mode {self.spatial_mode!r}")
        object.__setattr__(self, "hurst", H)
        object.__setattr__(self, "riesz_alpha", a)

        c_alpha = riesz_constant(a)
        direct, spectral_unit = _parseval_gaussian(a)
        gap = abs(direct - c_alpha * spectral_unit) / abs(direct)
        if gap > 1e-6:
            raise ModelError(f"Riesz constant fails the Gaussian energy identity (gap {gap:.2e})")
        object.__setattr__(self, "riesz_constant", c_alpha)
        object.__setattr__(self, "parseval_gap", gap)
        # time spectral density h(tau) = c_H |tau|^(1-2H), c_H = Gamma(2H+1) sin(pi H)
        object.__setattr__(self, "time_constant", H * (2 * H - 1) * riesz_constant(2 * H - 1))

        if not math.isfinite(self.dalang_integral()):
            raise ModelError("Dalang integral diverges")
        object.__setattr__(self, "assumption_a_order", self._assumption_a())

    @property
    def white(self) -> bool:
        return self.spatial_mode == "white"

    @property
    def space_exponent(self) -> float:
        """Homogeneity degree of the spatial pairing ``<G(a), G(b)>_0`` in ``(a, b)``."""
        return 1.0 if self.white else self.riesz_alpha + 1.0

    def g(self, xi):
        """Spatial spectral density (no ``(2 pi)^-1``)."""
        xi = np.asarray(xi, dtype=float)
        if self.white:
            return np.ones_like(xi)
        return self.riesz_constant * np.abs(xi) ** (-self.riesz_alpha)

    def h(self, tau):
        """Temporal spectral density (no ``(2 pi)^-1``)."""
        tau = np.asarray(tau, dtype=float)
        return self.time_constant * np.abs(tau) ** (1.0 - 2.0 * self.hurst)

    def spatial_integral(self, func) -> float:
        """``int_R func(|xi|) mu(d xi)`` for an even integrand given on ``[0, inf)``."""
        if self.white:
            res = integrate.quad(func, 0.0, math.inf, epsabs=QUAD_ABS, epsrel=QUAD_REL,
                                 limit=QUAD_LIMIT, full_output=1)
            return _check_quad(res, "spatial spectral integral") / math.pi
        return self.riesz_constant * _power_weighted(func, self.riesz_alpha) / math.pi

    def dalang_integral(self) -> float:
        """``int (1 + xi^2)^-1 mu(d xi)``."""
        return self.spatial_integral(lambda x: 1.0 / (1.0 + x * x))

    def _assumption_a(self) -> int:
        # 1/(h g) grows like |tau|^(2H-1) |xi|^alpha; in polar form the integral
        # of (1 + r^2)^-k r^(2H-1+alpha) r dr converges iff 2k > 2H + alpha + 1
        p = 2 * self.hurst - 1 + (0.0 if self.white else self.riesz_alpha)
        for k in range(1, 5):
            if 2 * k > p + 2:
                radial = integrate.quad(lambda r: r ** (p + 1) * (1 + r * r) ** (-k), 0, math.inf,
                                        limit=QUAD_LIMIT)[0]
                if math.isfinite(radial):
                    return k
        raise ModelError("Assumption A integral diverges for every k <= 4")


class WaveKernel:
    """Fundamental solution ``G(t, x) = 1/2 1{|x| < t}`` and its Fourier transform."""

    @staticmethod
    def G(t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.where(np.abs(x) < t, 0.5, 0.0)

    @staticmethod
    def FG(t, xi):
        """``sin(t |xi|) / |xi|`` with the removable value ``t`` at ``xi = 0``."""
        t = np.asarray(t, dtype=float)
        xi = np.abs(np.asarray(xi, dtype=float))
        small = xi * np.abs(t) < 1e-8
        safe = np.where(small, 1.0, xi)
        return np.where(small, t, np.sin(t * safe) / safe)


def gamma_eval(model: CovarianceModel, t: float) -> float:
    """Temporal covariance ``H(2H-1)|t|^(2H-2)``."""
    if t == 0:
        raise KernelSingularity("kernel singularity: gamma is infinite at t = 0")
    H = model.hurst
    return H * (2 * H - 1) * abs(t) ** (2 * H - 2)


def f_eval(model: CovarianceModel, x: float) -> float:
    """Riesz covariance ``|x|^(alpha-1)``."""
    if model.white:
        raise KernelSingularity("f is not a function in white mode")
    if x == 0:
        raise KernelSingularity("kernel singularity: f is infinite at x = 0")
    return abs(x) ** (model.riesz_alpha - 1)


def spectral_densities(model: CovarianceModel, tau: float, xi: float) -> tuple[float, float]:
    """Return ``(h(tau), g(xi))``."""
    if tau == 0 or (xi == 0 and not model.white):
        raise KernelSingularity("density singularity at the origin")
    return float(model.h(tau)), float(model.g(xi))


def big_gamma(model: CovarianceModel, t: float) -> float:
    """``2 int_0^t gamma = 2H t^(2H-1)``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    return 2 * model.hurst * t ** (2 * model.hurst - 1) if t > 0 else 0.0


def K_M(model: CovarianceModel, M: float) -> float:
    """``int (M^2 + 4 xi^2)^-1 mu(d xi)`` by adaptive quadrature."""
    if M <= 0:
        raise ValueError("M must be positive")
    return model.spatial_integral(lambda x: 1.0 / (M * M + 4.0 * x * x))


def c0(model: CovarianceModel) -> float:
    """``(4/3) int (1 + xi^2)^-1 mu(d xi)``."""
    return 4.0 / 3.0 * model.dalang_integral()


def I_beta_w(beta: float, xi: float) -> float:
    """``int_0^inf exp(-beta t) sin^2(t|xi|)/|xi|^2 dt = (2/beta) / (beta^2 + 4 xi^2)``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return 2.0 / beta / (beta * beta + 4.0 * xi * xi)


def I_beta_w_quad(beta: float, xi: float) -> float:
    """Quadrature of the integral in :func:`I_beta_w`."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    w = abs(xi)
    if w == 0:
        f = lambda t: t * t * math.exp(-beta * t)
    else:
        f = lambda t: math.exp(-beta * t) * math.sin(t * w) ** 2 / (w * w)
    res = integrate.quad(f, 0.0, math.inf, epsabs=1e-15, epsrel=1e-12, limit=QUAD_LIMIT,
                         full_output=1)
    return float(res[0])


def l2_norm_FG(s: float) -> float:
    """``int |FG(s)(xi)|^2 d xi = pi s``."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    return math.pi * s


def l2_norm_FG_quad(s: float) -> float:
    """``int sin^2(s xi) / xi^2 d xi`` by quadrature with an oscillatory tail."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    if s == 0:
        return 0.0
    X = 50.0 / s
    body = lambda x: math.sin(s * x) ** 2 / (x * x) if x > 0 else s * s
    head = integrate.quad(body, 0.0, X, limit=QUAD_LIMIT, epsabs=1e-13, epsrel=1e-12)[0]
    # sin^2 = (1 - cos(2 s x)) / 2 on the tail
    osc = integrate.quad(lambda x: 0.5 / (x * x), X, math.inf, weight="cos", wvar=2 * s,
                         limlst=200)[0]
    return 2.0 * (head + 0.5 / X - osc)
