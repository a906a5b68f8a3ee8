"""Inner products of the noise spaces computed two independent ways.

Every pairing is evaluated as a physical double integral against the
covariance kernel and as an integral of Fourier transforms against the
spectral measure.  One-dimensional pairings share a single engine which is
reused for the spatial kernel ``|x|^(alpha-1)`` and for the temporal kernel
``H(2H-1)|t|^(2H-2)``; space-time functions are finite sums of separable
terms, so their pairings factor into products of one-dimensional ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import roots_jacobi, roots_legendre

from .model import (QUAD_ABS, QUAD_LIMIT, QUAD_REL, CovarianceModel, QuadratureFailure,
                    WaveKernel, second_primitive)

__all__ = [
    "EnergyDivergence",
    "TestFunction",
    "SpaceTimeFunction",
    "EnergyReport",
    "Pairing",
    "spatial_pairing",
    "temporal_pairing",
    "energy_f",
    "energy_pair",
    "inner_P0",
    "inner_H",
    "abs_norm_H",
    "max_principle_scan",
    "max_principle_direct",
    "hermiticity_check",
    "gaussian",
    "wave_profile",
    "modulated",
    "indicator",
    "tent",
    "laplace",
    "gaussian_cosine",
    "parseval_suite",
    "random_separable",
]

XI_MAX = 16000.0         # spectral truncation for slowly decaying transforms
PANEL = 0.25             # spectral panel width
PANEL_NODES = 16
TAIL_WINDOW = 400.0      # averaging window for the asymptotic xi^-2 coefficient
CORR_NODES = 24
CORR_SPLIT = 6

_GL_X, _GL_W = roots_legendre(PANEL_NODES)
_CL_X, _CL_W = roots_legendre(CORR_NODES)


class EnergyDivergence(QuadratureFailure):
    """The direct double integral did not converge within the budget."""


@dataclass(frozen=True)
class TestFunction:
    """Complex or real function on the line with an effective compact support.

    Parameters
    ----------
    evaluator : callable
        Vectorized ``x -> phi(x)``; assumed negligible outside ``support``.
    support : (float, float)
    fourier : callable, optional
        Closed form of ``F phi(xi) = int exp(-i xi x) phi(x) dx``.
    breakpoints : tuple of float
        Points inside the support where ``phi`` has a jump or a kink.
    bandwidth : float, optional
        Frequency beyond which ``|F phi|`` is negligible.  ``None`` marks a
        slowly decaying transform, for which a ``xi^-2`` tail is added.
    """

    __test__ = False

    evaluator: Callable
    support: tuple[float, float]
    fourier: Callable | None = None
    breakpoints: tuple[float, ...] = ()
    bandwidth: float | None = None
    is_complex: bool = False
    is_l1: bool = True
    finite_energy: bool = True
    name: str = ""

    def __call__(self, x):
        return self.evaluator(np.asarray(x, dtype=float))

    def knots(self) -> np.ndarray:
        a, b = self.support
        inner = [p for p in self.breakpoints if a < p < b]
        return np.array(sorted({a, b, *inner}))

    def absolute(self) -> "TestFunction":
        """``|phi|`` (no closed-form transform)."""
        ev = self.evaluator
        return TestFunction(lambda x: np.abs(ev(x)), self.support, None, self.breakpoints,
                            self.bandwidth, False, self.is_l1, self.finite_energy,
                            f"|{self.name}|")

    def scaled(self, lam: complex) -> "TestFunction":
        ev, fo = self.evaluator, self.fourier
        return TestFunction(lambda x: lam * ev(x), self.support,
                            None if fo is None else (lambda xi: lam * fo(xi)),
                            self.breakpoints, self.bandwidth,
                            self.is_complex or np.iscomplexobj(lam), self.is_l1,
                            self.finite_energy, f"{lam}*{self.name}")

    def numeric_fourier(self, xi) -> np.ndarray:
        """Panel Gauss-Legendre evaluation of the transform.

        Panels are refined with the frequency so that each holds at most
        two periods of ``exp(-i xi x)``.
        """
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        flat = xi.ravel()
        order = np.argsort(np.abs(flat))
        knots = self.knots()
        width = float(np.max(np.diff(knots)))
        out = np.empty(flat.shape, dtype=complex)
        for lo in range(0, flat.size, 512):
            idx = order[lo:lo + 512]
            top = float(np.abs(flat[idx]).max())
            split = max(CORR_SPLIT, math.ceil(width * top / (4 * math.pi)))
            x, w = _panel_nodes(knots, split)
            out[idx] = np.exp(-1j * np.outer(flat[idx], x)) @ (self.evaluator(x) * w)
        return out.reshape(xi.shape)

    def transform(self, xi) -> np.ndarray:
        if self.fourier is not None:
            return np.asarray(self.fourier(np.asarray(xi, dtype=float)), dtype=complex)
        return self.numeric_fourier(xi)

    def fourier_gap(self, xi) -> float:
        """Max deviation between the closed-form and the numerical transform."""
        if self.fourier is None:
            return 0.0
        return float(np.max(np.abs(self.transform(xi) - self.numeric_fourier(xi))))


@dataclass(frozen=True)
class SpaceTimeFunction:
    """``S(s, x) = sum_k c_k a_k(s) b_k(x)`` with time factors supported in ``s >= 0``."""

    terms: tuple[tuple[complex, TestFunction, TestFunction], ...]
    name: str = ""

    def __call__(self, s, x):
        s = np.asarray(s, dtype=float)
        x = np.asarray(x, dtype=float)
        return sum(c * a(s) * b(x) for c, a, b in self.terms)


@dataclass(frozen=True)
class EnergyReport:
    direct_value: complex
    spectral_value: complex
    abs_gap: float = field(init=False)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "abs_gap", float(abs(self.direct_value - self.spectral_value)))

    @property
    def rel_gap(self) -> float:
        return self.abs_gap / (1.0 + abs(self.direct_value))

    def as_dict(self) -> dict:
        d, s = complex(self.direct_value), complex(self.spectral_value)
        return {"name": self.name, "direct": d.real, "direct_imag": d.imag,
                "spectral": s.real, "spectral_imag": s.imag,
                "abs_gap": self.abs_gap, "rel_gap": self.rel_gap}


def _panel_nodes(knots: np.ndarray, split: int) -> tuple[np.ndarray, np.ndarray]:
    edges = np.concatenate([np.linspace(a, b, split + 1)[:-1] for a, b in zip(knots[:-1], knots[1:])]
                           + [knots[-1:]])
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    return ((lo + hi) / 2 + half * _CL_X).ravel(), (half * _CL_W).ravel()


@dataclass(frozen=True)
class Pairing:
    """Kernel ``amp |u|^(a-1)`` with spectral density ``const |xi|^-a``.

    ``a = None`` is the Dirac kernel with unit spectral density.
    """

    a: float | None
    amp: float = 1.0
    const: float = 1.0

    @property
    def dirac(self) -> bool:
        return self.a is None

    def density(self, xi: np.ndarray) -> np.ndarray:
        if self.dirac:
            return np.ones_like(xi)
        return self.const * np.abs(xi) ** (-self.a)

    # direct side -------------------------------------------------------
    def direct(self, phi: TestFunction, psi: TestFunction) -> complex:
        """``amp int int |x - y|^(a-1) phi(x) conj(psi(y)) dx dy``."""
        if self.dirac:
            knots = np.union1d(phi.knots(), psi.knots())
            x, w = _panel_nodes(knots, CORR_SPLIT)
            return complex(np.sum(phi(x) * np.conj(psi(x)) * w))
        (pa, pb), (qa, qb) = phi.support, psi.support
        kp, kq = phi.knots(), psi.knots()

        def corr(w: float) -> complex:
            # C(w) = int phi(y + w) conj(psi(y)) dy
            lo, hi = max(qa, pa - w), min(qb, pb - w)
            if hi <= lo:
                return 0.0
            k = np.concatenate([[lo, hi], kq, kp - w])
            k = np.unique(k[(k >= lo) & (k <= hi)])
            y, wt = _panel_nodes(k, CORR_SPLIT)
            return complex(np.sum(phi(y + w) * np.conj(psi(y)) * wt))

        kinks = np.unique(np.subtract.outer(kp, kq).ravel())
        total = 0.0 + 0.0j
        for sign in (1.0, -1.0):
            top = pb - qa if sign > 0 else qb - pa
            if top <= 0:
                continue
            pts = np.unique(np.concatenate([[0.0, top], sign * kinks]))
            pts = pts[(pts >= 0) & (pts <= top)]
            for part in (np.real, np.imag):
                if part is np.imag and not (phi.is_complex or psi.is_complex):
                    continue
                f = lambda w, s=sign, p=part: float(p(corr(s * w)))
                val = _alg_quad(f, self.a - 1.0, pts)
                total += val if part is np.real else 1j * val
        return self.amp * (total if (phi.is_complex or psi.is_complex) else total.real)

    # spectral side -----------------------------------------------------
    def spectral(self, phi: TestFunction, psi: TestFunction) -> complex:
        """``(2 pi)^-1 int F phi conj(F psi) density(xi) d xi``."""
        bands = [b for b in (phi.bandwidth, psi.bandwidth) if b is not None]
        top = min(bands) if bands else XI_MAX
        total = 0.0 + 0.0j
        for sign in (1.0, -1.0):
            prod = lambda xi, s=sign: phi.transform(s * xi) * np.conj(psi.transform(s * xi))
            total += self._half_line(prod, top)
            if not bands:
                total += self._tail(prod, top)
        val = total / (2.0 * math.pi)
        return val if (phi.is_complex or psi.is_complex) else val.real

    def _half_line(self, prod, top: float) -> complex:
        edges = np.arange(0.0, top + PANEL / 2, PANEL)
        lo, hi = edges[1:-1, None], edges[2:, None]
        xi = ((lo + hi) / 2 + (hi - lo) / 2 * _GL_X).ravel()
        w = ((hi - lo) / 2 * _GL_W).ravel()
        body = np.sum(prod(xi) * self.density(xi) * w)
        h = edges[1]
        if self.dirac:
            x0 = h / 2 * (1 + _GL_X)
            first = np.sum(prod(x0) * h / 2 * _GL_W)
        else:
            jx, jw = roots_jacobi(PANEL_NODES, 0.0, -self.a)
            x0 = h / 2 * (1 + jx)
            first = self.const * (h / 2) ** (1 - self.a) * np.sum(prod(x0) * jw)
        return complex(first + body)

    def _tail(self, prod, top: float) -> complex:
        s = np.linspace(0.0, 1.0, 200_001)
        xi = top + TAIL_WINDOW * s
        # Hann weights: the mean of an oscillating factor converges fast
        hann = np.sin(np.pi * s) ** 2
        coef = np.sum(hann * xi * xi * prod(xi)) / np.sum(hann)
        p = 0.0 if self.dirac else self.a
        return complex(self.const * coef * top ** (-1.0 - p) / (1.0 + p))


def _alg_quad(f, expo: float, pts: np.ndarray) -> float:
    """``int_0^top w^expo f(w) dw`` split at the kinks ``pts`` of ``f``."""
    total = 0.0
    for i, (a, b) in enumerate(zip(pts[:-1], pts[1:])):
        if i == 0:
            res = integrate.quad(f, a, b, weight="alg", wvar=(expo, 0.0), epsabs=QUAD_ABS * 1e-2,
                                 epsrel=QUAD_REL * 1e-2, limit=QUAD_LIMIT, full_output=1)
        else:
            res = integrate.quad(lambda w: w ** expo * f(w), a, b, epsabs=QUAD_ABS * 1e-2,
                                 epsrel=QUAD_REL * 1e-2, limit=QUAD_LIMIT, full_output=1)
        if not np.isfinite(res[0]) or res[1] > 1e-7 * max(1.0, abs(res[0])):
            raise EnergyDivergence(f"energy divergence on [{a}, {b}]: error {res[1]:.2e}")
        total += res[0]
    return total


def spatial_pairing(model: CovarianceModel) -> Pairing:
    if model.white:
        return Pairing(None)
    return Pairing(model.riesz_alpha, 1.0, model.riesz_constant)


def temporal_pairing(model: CovarianceModel) -> Pairing:
    H = model.hurst
    return Pairing(2 * H - 1, H * (2 * H - 1), model.time_constant)


def energy_pair(model: CovarianceModel, phi: TestFunction, psi: TestFunction,
                complex: bool = False, name: str = "") -> EnergyReport:
    """Bilinear energy ``E_f(phi, psi)``; with ``complex`` the second argument is conjugated."""
    if not (phi.is_l1 and psi.is_l1 and phi.finite_energy and psi.finite_energy):
        raise EnergyDivergence("energy divergence: arguments must be L1 with finite energy")
    pair = spatial_pairing(model)
    if not complex and (phi.is_complex or psi.is_complex):
        raise ValueError("complex arguments need complex=True")
    return EnergyReport(pair.direct(phi, psi), pair.spectral(phi, psi),
                        name=name or f"E({phi.name},{psi.name})")


def energy_f(model: CovarianceModel, phi: TestFunction, name: str = "") -> EnergyReport:
    return energy_pair(model, phi, phi, phi.is_complex, name or f"E({phi.name})")


def inner_P0(model: CovarianceModel, phi: TestFunction, psi: TestFunction,
             name: str = "") -> EnergyReport:
    """``<phi, psi>_0`` for spatial functions."""
    return energy_pair(model, phi, psi, phi.is_complex or psi.is_complex,
                       name or f"P0({phi.name},{psi.name})")


def inner_H(model: CovarianceModel, S1: SpaceTimeFunction, S2: SpaceTimeFunction,
            name: str = "") -> EnergyReport:
    """``<S1, S2>_H``: the sums are expanded into products of 1-D pairings."""
    tp, sp = temporal_pairing(model), spatial_pairing(model)
    for _, a, _ in S1.terms + S2.terms:
        if a.support[0] < 0:
            raise ValueError("time factors must be supported in [0, inf)")
    direct = spectral = 0.0
    for c1, a1, b1 in S1.terms:
        for c2, a2, b2 in S2.terms:
            w = c1 * np.conj(c2)
            direct = direct + w * tp.direct(a1, a2) * sp.direct(b1, b2)
            spectral = spectral + w * tp.spectral(a1, a2) * sp.spectral(b1, b2)
    return EnergyReport(direct, spectral, name=name or f"H({S1.name},{S2.name})")


def abs_norm_H(model: CovarianceModel, a: TestFunction, b: TestFunction) -> float:
    """``||a (x) b||_{|H|}`` for a single separable term."""
    tp, sp = temporal_pairing(model), spatial_pairing(model)
    aa, bb = a.absolute(), b.absolute()
    return math.sqrt(abs(tp.direct(aa, aa) * sp.direct(bb, bb)))


# ---------------------------------------------------------------------------
# suite functions

def gaussian(mean: float = 0.0, sd: float = 1.0, name: str = "") -> TestFunction:
    c = 1.0 / (sd * math.sqrt(2 * math.pi))
    return TestFunction(lambda x: c * np.exp(-0.5 * ((x - mean) / sd) ** 2),
                        (mean - 9 * sd, mean + 9 * sd),
                        lambda xi: np.exp(-1j * xi * mean - 0.5 * (sd * xi) ** 2),
                        bandwidth=9.0 / sd, name=name or f"N({mean},{sd}^2)")


def wave_profile(t: float) -> TestFunction:
    """``G(t, .)``."""
    return TestFunction(lambda x: WaveKernel.G(t, x), (-t, t), lambda xi: WaveKernel.FG(t, xi),
                        name=f"G({t})")


def modulated(phi: TestFunction, eta: float) -> TestFunction:
    """``exp(-i eta x) phi(x)``, whose transform is ``F phi(xi + eta)``."""
    ev, fo = phi.evaluator, phi.fourier
    return TestFunction(lambda x: np.exp(-1j * eta * x) * ev(x), phi.support,
                        None if fo is None else (lambda xi: fo(xi + eta)),
                        phi.breakpoints, None if phi.bandwidth is None else phi.bandwidth + abs(eta),
                        True, name=f"e^(-i{eta}x){phi.name}")


def indicator(a: float, b: float) -> TestFunction:
    def fourier(xi):
        xi = np.asarray(xi, dtype=float)
        small = np.abs(xi) < 1e-12
        s = np.where(small, 1.0, xi)
        return np.where(small, b - a, (np.exp(-1j * a * s) - np.exp(-1j * b * s)) / (1j * s))
    return TestFunction(lambda x: ((x >= a) & (x <= b)).astype(float), (a, b), fourier,
                        name=f"1[{a},{b}]")


def tent(center: float = 0.0, half: float = 1.0) -> TestFunction:
    def fourier(xi):
        xi = np.asarray(xi, dtype=float)
        u = half * xi / 2
        return np.exp(-1j * center * xi) * half * np.sinc(u / math.pi) ** 2
    return TestFunction(lambda x: np.clip(1 - np.abs(x - center) / half, 0, None),
                        (center - half, center + half), fourier, (center,),
                        name=f"tent({center},{half})")


def laplace() -> TestFunction:
    return TestFunction(lambda x: np.exp(-np.abs(x)), (-42.0, 42.0),
                        lambda xi: 2.0 / (1.0 + np.asarray(xi) ** 2), (0.0,), name="exp(-|x|)")


def gaussian_cosine(freq: float = 3.0) -> TestFunction:
    g = gaussian()
    return TestFunction(lambda x: g(x) * np.cos(freq * x), g.support,
                        lambda xi: 0.5 * (g.fourier(xi - freq) + g.fourier(xi + freq)),
                        bandwidth=g.bandwidth + freq, name=f"N(0,1)cos({freq}x)")


def parseval_suite(model: CovarianceModel) -> list[EnergyReport]:
    """Direct-versus-spectral reports for the standard battery of test functions."""
    G1, Gh = wave_profile(1.0), wave_profile(0.5)
    g0, g1 = gaussian(), gaussian(1.3, 0.8)
    bump_t = tent(1.0, 1.0)
    box_t = indicator(0.5, 1.5)
    far_t = gaussian(4.0, 0.4)
    out = [
        energy_f(model, g0),
        energy_pair(model, g0, g1),
        energy_f(model, G1),
        inner_P0(model, Gh, G1),
        energy_f(model, modulated(G1, 2.0)),
        energy_pair(model, modulated(G1, 2.0), modulated(g0, -1.0), complex=True),
        energy_f(model, tent()),
        energy_f(model, laplace()),
        energy_f(model, gaussian_cosine()),
        energy_pair(model, indicator(0.0, 1.0), g0),
    ]
    tp = temporal_pairing(model)
    out.append(EnergyReport(tp.direct(bump_t, bump_t), tp.spectral(bump_t, bump_t),
                            name="time tent"))
    out.append(EnergyReport(tp.direct(box_t, bump_t), tp.spectral(box_t, bump_t),
                            name="time box x tent"))
    prod = SpaceTimeFunction(((1.0, far_t, g0),), "N x N")
    wave = SpaceTimeFunction(((1.0, bump_t, G1),), "tent x G(1)")
    mix = SpaceTimeFunction(((1.0, far_t, g0), (-0.5, box_t, G1)), "sum of products")
    out += [inner_H(model, prod, prod), inner_H(model, wave, wave), inner_H(model, mix, mix),
            inner_H(model, prod, mix)]
    return out


def random_separable(rng: np.random.Generator, terms: int = 3) -> SpaceTimeFunction:
    """Random combination of separable Gaussians (time factors centered well inside s > 0)."""
    parts = []
    for _ in range(terms):
        c = float(rng.normal())
        a = gaussian(float(rng.uniform(5.0, 7.0)), float(rng.uniform(0.2, 0.5)))
        b = gaussian(float(rng.uniform(-1.0, 1.0)), float(rng.uniform(0.3, 1.0)))
        parts.append((c, a, b))
    return SpaceTimeFunction(tuple(parts), "random")


# ---------------------------------------------------------------------------
# max principle and Hermitian symmetry

def max_principle_scan(model: CovarianceModel, t: float, eta_grid: Sequence[float]) -> list[float]:
    """``m(eta) = int |F G(t)(xi + eta)|^2 mu(d xi)`` on the spectral side."""
    if t <= 0:
        raise ValueError("t must be positive")
    pair = spatial_pairing(model)
    G = wave_profile(t)
    vals = [float(np.real(pair.spectral(modulated(G, eta), modulated(G, eta)))) for eta in eta_grid]
    return vals


def max_principle_direct(model: CovarianceModel, t: float, eta: float) -> float:
    """Physical form ``1/4 int omega_t(w) cos(eta w) f(w) dw`` of the same quantity."""
    if model.white:
        return t / 2.0
    a = model.riesz_alpha
    # omega_t(w) = (2t - |w|)_+ is the overlap of two copies of (-t, t)
    res = integrate.quad(lambda w: (2 * t - w) * math.cos(eta * w), 0.0, 2 * t, weight="alg",
                         wvar=(a - 1.0, 0.0), epsabs=1e-13, epsrel=1e-12, limit=QUAD_LIMIT)
    return 0.5 * res[0]


def hermiticity_check(field: np.ndarray) -> float:
    """Max of ``|F(-k) - conj F(k)|`` over the discrete spectrum, relative to ``max |F|``."""
    field = np.asarray(field)
    F = np.fft.fftn(field)
    axes = tuple(range(F.ndim))
    flipped = np.roll(np.flip(F, axis=axes), shift=1, axis=axes)
    scale = max(1.0, float(np.max(np.abs(F))))
    return float(np.max(np.abs(flipped - np.conj(F)))) / scale


def g_pairing_closed(model: CovarianceModel, a: float, b: float) -> float:
    """``<G(a), G(b)>_0`` in closed form."""
    if model.white:
        return 0.5 * min(a, b)
    al = model.riesz_alpha
    return 0.5 * float(second_primitive(a + b, al) - second_primitive(a - b, al))
