import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import gamma as gamma_fn

from chaoswave.hilbert import (EnergyDivergence, SpaceTimeFunction, TestFunction, abs_norm_H, energy_f,
                               energy_pair, g_pairing_closed, gaussian, gaussian_cosine, hermiticity_check,
                               indicator, inner_H, inner_P0, laplace, max_principle_direct,
                               max_principle_scan, modulated, parseval_suite, random_separable, spatial_pairing, tent,
                               wave_profile)
from chaoswave.kernels import phi as phi_kernel
from chaoswave.model import CovarianceModel, gamma_eval, riesz_constant

# m(eta) at t = 1, alpha = 1/2, frozen after agreement of the spectral and physical forms
M_GOLDEN = {0.0: 1.8856180831657396, 0.5: 1.807146850681279, 1.0: 1.5979919027452745,
            2.0: 1.0624408751487113, 5.0: 0.6008748255864891}

SUITE = [gaussian(), gaussian(1.3, 0.8), wave_profile(1.0), tent(), laplace(), gaussian_cosine(),
         indicator(0.0, 1.0)]


@pytest.mark.parametrize("fn", SUITE, ids=lambda f: f.name)
def test_closed_fourier_matches_numeric(fn):
    assert fn.fourier_gap(np.linspace(-30, 30, 241)) <= 1e-6


def test_gaussian_energy_closed_form(riesz):
    # x - y ~ N(0, 2), so the energy is E |N(0, 2)|^(-1/2)
    exact = gamma_fn(0.25) / math.sqrt(2 * math.pi)
    r = energy_f(riesz, gaussian())
    assert r.direct_value == pytest.approx(exact, rel=1e-9)
    assert r.spectral_value == pytest.approx(exact, rel=1e-6)


def test_white_indicator_plancherel(white):
    r = energy_f(white, indicator(0.0, 1.0))
    assert r.direct_value == pytest.approx(1.0, abs=1e-12)
    assert r.spectral_value == pytest.approx(1.0, abs=1e-6)


@given(st.floats(-3.0, 3.0).filter(lambda v: abs(v) > 1e-3))
def test_energy_scales_quadratically(lam):
    m = CovarianceModel()
    g = gaussian()
    base, scaled = energy_f(m, g), energy_f(m, g.scaled(lam))
    assert scaled.direct_value == pytest.approx(lam**2 * base.direct_value, rel=1e-9)
    assert scaled.spectral_value == pytest.approx(lam**2 * base.spectral_value, rel=1e-9)


def test_pair_diagonal_and_shifted(riesz):
    g = gaussian()
    assert energy_pair(riesz, g, g).direct_value == energy_f(riesz, g).direct_value
    r = energy_pair(riesz, g, gaussian(1.0, 1.0))
    assert r.abs_gap <= 1e-6


def test_modulated_kernel_identity(riesz):
    G = wave_profile(1.0)
    r = energy_f(riesz, modulated(G, 2.0))
    assert r.rel_gap <= 1e-6
    assert np.real(r.spectral_value) == pytest.approx(M_GOLDEN[2.0], rel=1e-9)


def test_energy_rejects_non_integrable(riesz):
    bad = TestFunction(lambda x: np.ones_like(x), (-1.0, 1.0), is_l1=False)
    with pytest.raises(EnergyDivergence):
        energy_f(riesz, bad)


@pytest.mark.parametrize("mode", ["riesz", "white"])
def test_parseval_family(mode):
    for r in parseval_suite(CovarianceModel(spatial_mode=mode)):
        assert r.abs_gap <= 1e-5 * (1 + abs(r.direct_value)), r.name


def test_cauchy_schwarz(riesz):
    fns = [gaussian(), gaussian(1.3, 0.8), tent(0.5, 0.7), modulated(gaussian(), 1.5)]
    pair = spatial_pairing(riesz)
    for a in fns:
        for b in fns:
            lhs = abs(energy_pair(riesz, a, b, complex=True).direct_value)
            # only the direct side: |phi| has no closed-form transform
            ea = pair.direct(a.absolute(), a.absolute()).real
            eb = pair.direct(b.absolute(), b.absolute()).real
            assert lhs <= math.sqrt(ea * eb) * (1 + 1e-9)


def test_inner_P0_examples(riesz, white):
    G = wave_profile(1.0)
    r = inner_P0(riesz, G, G)
    # (2 pi)^-1 int sin^2(xi)/xi^2 c |xi|^-1/2 d xi with u = xi^2 substitution at the origin
    c = riesz_constant(0.5)
    f = lambda v: 4 * c * math.sin(v * v) ** 2 / v**4 / (2 * math.pi) if v > 0 else 4 * c / (2 * math.pi)
    head = integrate.quad(f, 0, 40, limit=500)[0]
    tail = 4 * c / (2 * math.pi) * 0.5 / (3 * 40**3)  # mean of sin^2 over the tail
    assert r.spectral_value == pytest.approx(head + tail, abs=1e-6)
    assert r.abs_gap <= 1e-6
    assert r.direct_value == pytest.approx(g_pairing_closed(riesz, 1.0, 1.0), rel=1e-9)
    assert inner_P0(white, G, G).direct_value == pytest.approx(0.5, abs=1e-12)
    sep = inner_P0(riesz, indicator(-2.0, -1.0), indicator(1.0, 2.0))
    assert sep.direct_value > 0


def test_inner_H_product_gaussian(riesz):
    S = SpaceTimeFunction(((1.0, gaussian(3.0, 0.3), gaussian()),))
    r = inner_H(riesz, S, S)
    assert r.abs_gap <= 1e-5 * (1 + abs(r.direct_value))


def test_inner_H_far_shift_small_positive(riesz):
    S1 = SpaceTimeFunction(((1.0, gaussian(2.0, 0.2), gaussian()),))
    S2 = SpaceTimeFunction(((1.0, gaussian(40.0, 0.2), gaussian()),))
    v = inner_H(riesz, S1, S2).direct_value
    assert 0 < v < 0.1 * inner_H(riesz, S1, S1).direct_value


def test_wave_kernel_norm_is_phi(riesz):
    # ||G(1 - ., . - y) 1_[0,1]||_H^2 = int int gamma(s - r) <G(1-s), G(1-r)>_0, with u = s - r >= 0
    def inner(s):
        val = integrate.quad(lambda u: g_pairing_closed(riesz, 1 - s, 1 - s + u) if u > 0 else 0.0,
                             0, s, weight="alg", wvar=(-0.5, 0), epsabs=1e-12)[0]
        return val
    amp = gamma_eval(riesz, 1.0)
    total = 2 * amp * integrate.quad(inner, 0, 1, epsabs=1e-11)[0]
    assert total == pytest.approx(phi_kernel(riesz, 1.0), rel=1e-6)


def test_abs_norm_dominates(riesz):
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = gaussian(float(rng.uniform(3, 5)), 0.3)
        b = modulated(gaussian(0.0, 0.7), float(rng.uniform(0, 3)))
        S = SpaceTimeFunction(((1.0, a, b),))
        h = abs(inner_H(riesz, S, S).direct_value)
        assert math.sqrt(h) <= abs_norm_H(riesz, a, b) * (1 + 1e-9)


def test_positivity_on_random_functions(riesz):
    rng = np.random.default_rng(2024)
    for _ in range(20):
        S = random_separable(rng)
        s, x = np.meshgrid(np.linspace(0, 10, 401), np.linspace(-5, 5, 241), indexing="ij")
        l2 = np.sum(S(s, x) ** 2) * (10 / 400) * (10 / 240)
        if l2 > 1e-6:
            assert np.real(inner_H(riesz, S, S).spectral_value) > 0


def test_max_principle_goldens(riesz):
    etas = sorted(M_GOLDEN)
    vals = max_principle_scan(riesz, 1.0, etas)
    for e, v in zip(etas, vals):
        assert v == pytest.approx(M_GOLDEN[e], rel=1e-9)
        assert v == pytest.approx(max_principle_direct(riesz, 1.0, e), rel=1e-8)
    assert vals[0] == pytest.approx(np.real(inner_P0(riesz, wave_profile(1.0), wave_profile(1.0)).spectral_value),
                                    rel=1e-12)


@settings(max_examples=10)
@given(st.floats(0.2, 2.0), st.floats(0.0, 8.0))
def test_max_principle_property(t, eta):
    m = CovarianceModel()
    m0, me, mneg = max_principle_scan(m, t, [0.0, eta, -eta])
    assert me <= m0 * (1 + 1e-7)
    assert me == pytest.approx(mneg, rel=1e-12)


def test_hermiticity():
    rng = np.random.default_rng(0)
    assert hermiticity_check(rng.normal(size=(64, 64))) <= 1e-10
    x = np.fft.fftfreq(32) * 32
    even = np.exp(-np.add.outer(x**2, x**2) / 20)
    assert np.max(np.abs(np.fft.fft2(even).imag)) <= 1e-12 * np.max(np.abs(np.fft.fft2(even)))
    assert hermiticity_check(even) <= 1e-12
    # a complex field breaks the symmetry
    assert hermiticity_check(rng.normal(size=(8, 8)) * 1j) > 1e-3


@given(st.integers(2, 20), st.integers(0, 2**31))
def test_hermiticity_property(n, seed):
    f = np.random.default_rng(seed).normal(size=(n, n))
    assert hermiticity_check(f) <= 1e-12
