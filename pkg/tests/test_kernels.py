import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoswave.kernels import (ChaosKernelSet, ScanExhausted, alpha_1_closed, alpha_bound, alpha_bound_check,
                               alpha_estimate, alpha_n, constants_table, d2_norm_constant, d_norm_constant,
                               d_norm_order2, f_n_eval, f_tilde_eval, g_pairing, phi, psi, psi0, psi0_closed,
                               psi1_spectral, scan_M, second_moment_series)
from chaoswave.model import CovarianceModel, K_M, big_gamma, c0

# frozen goldens (riesz H = 0.75, alpha = 0.5)
ALPHA2_RIESZ = 0.06053661172263294
ALPHA2_WHITE = 0.010631936851652592
ALPHA3_RIESZ = 0.0024824327
CONSTANTS_RIESZ = {0.5: (8.0, 69198.18312551164, 8.0, 188100.16375245963),
                   1.0: (8.0, 412553753.35354006, 8.0, 1121437371.0035028),
                   2.0: (8.0, 7331996495899805.0, 16.0, 1.5737659748577267e30)}


def _product_formula(args, t, x):
    # independent evaluator: sort check, then |dx| < dt indicators times 1/2 each
    times = [a[0] for a in args] + [t]
    if not all(0 < times[i] < times[i + 1] for i in range(len(args))):
        return 0.0
    pts = list(args) + [(t, x)]
    out = 1.0
    for (s0, y0), (s1, y1) in zip(pts, pts[1:]):
        out *= 0.5 if abs(y1 - y0) < s1 - s0 else 0.0
    return out


def test_f_n_examples():
    assert f_n_eval(1, [(0.5, 0.0)], 1.0, 0.0) == 0.5
    assert f_n_eval(2, [(0.6, 0.0), (0.3, 0.0)], 1.0, 0.0) == 0.0
    rng = np.random.default_rng(5)
    for _ in range(50):
        ts = np.sort(rng.uniform(0, 1, 3))
        args = [(float(s), float(rng.uniform(-0.3, 0.3))) for s in ts]
        assert f_n_eval(3, args, 1.0, 0.0) == _product_formula(args, 1.0, 0.0)


@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(-1.0, 1.0)), min_size=1, max_size=4))
def test_f_n_bounds(args):
    n = len(args)
    v = f_n_eval(n, args, 1.0, 0.0)
    assert 0.0 <= v <= 2.0**-n
    assert 0.0 <= f_tilde_eval(n, args, 1.0, 0.0) <= 2.0**-n


def test_tilde_sum_identity():
    rng = np.random.default_rng(11)
    for i in range(100):
        n = 1 + i % 3
        K = ChaosKernelSet(n, 1.0, 0.0)
        # concentrated points so that many tuples are in the support
        args = [(float(rng.uniform(0, 1)), float(rng.normal(0, 0.2))) for _ in range(n - 1)]
        r, z = float(rng.uniform(0, 1)), float(rng.normal(0, 0.2))
        assert K.tilde_sum_defect(args, r, z) <= 1e-12


def test_h_j_vanishes_off_simplex():
    K = ChaosKernelSet(2, 1.0, 0.0)
    # theta after r: placing (r, z) first needs r before theta
    assert K.f_j(1, [(0.4, 0.0)], 0.6, 0.0) == 0.0
    assert K.f_j(2, [(0.4, 0.0)], 0.6, 0.0) == 0.25


def test_psi():
    assert psi(1.0) == 0.25 and psi(0.0) == 0.0
    # Riemann sum of G(r, z)^2 = 1/4 on |z| < r over [0, 2]
    r = (np.arange(2000) + 0.5) * 1e-3
    assert np.sum(0.25 * 2 * r) * 1e-3 == pytest.approx(psi(2.0), abs=1e-10)


def test_psi0(riesz, white):
    for t in (0.2, 0.7, 1.0):
        assert psi0(white, t) == pytest.approx(t * t / 4, rel=1e-8)
        assert psi0(riesz, t) == pytest.approx(psi0_closed(riesz, t), rel=1e-8)
    for model in (riesz, white):
        for t in np.linspace(0.1, 0.9, 9):
            assert psi0(model, t) <= c0(model) * t
        assert psi0(model, 1e-3) <= c0(model) * 1e-3


def test_g_pairing_dual(riesz, white):
    for a, b in [(1.0, 1.0), (0.3, 0.8), (1.7, 0.2)]:
        for m in (riesz, white):
            assert psi1_spectral(m, a, b) == pytest.approx(float(g_pairing(m, a, b)), rel=1e-8)


def test_phi(riesz, white):
    assert phi(riesz, 1.0) == pytest.approx(alpha_n(riesz, 1, 1.0), rel=1e-6)
    assert phi(white, 1.0) == pytest.approx(alpha_1_closed(white, 1.0), rel=1e-6)
    assert phi(riesz, 0.1) < phi(riesz, 0.2)
    for m in (riesz, white):
        for t in np.linspace(0.1, 1.0, 10):
            assert phi(m, t) <= big_gamma(m, t) * psi0(m, t)
    assert phi(white, 0.1) <= big_gamma(white, 0.1) * 0.1**2 / 4


def test_alpha2_dual_schemes(riesz, white):
    for m, golden in ((riesz, ALPHA2_RIESZ), (white, ALPHA2_WHITE)):
        quad = alpha_estimate(m, 2, 1.0, "quadrature")
        qmc = alpha_estimate(m, 2, 1.0, "qmc")
        assert quad.value == pytest.approx(golden, rel=1e-12)
        assert qmc.value == pytest.approx(quad.value, rel=1e-3)


def test_alpha3_qmc(riesz):
    est = alpha_estimate(riesz, 3, 1.0)
    assert est.method == "qmc" and est.points == 2**14
    assert est.rel_stderr < 0.01
    assert est.value == pytest.approx(ALPHA3_RIESZ, rel=1e-6)


def test_alpha_vanishes_at_zero_and_grows(riesz):
    for n in (1, 2):
        assert alpha_n(riesz, n, 0.0) == 0.0
        assert alpha_n(riesz, n, 0.01) < alpha_n(riesz, n, 0.5) < alpha_n(riesz, n, 1.0)
    assert alpha_n(riesz, 1, 1e-3) < 1e-6


@pytest.mark.parametrize("mode", ["riesz", "white"])
def test_alpha_bound_chain(mode):
    m = CovarianceModel(spatial_mode=mode)
    for n in (1, 2, 3):
        for t in (0.5, 1.0):
            rep = alpha_bound_check(m, n, t, [2, 5, 10, 20])
            assert rep.ok, rep.violations
            assert rep.values[n] >= 0
    assert alpha_bound_check(m, 1, 0.0, [2]).ok


def test_alpha_bound_white_n1(white):
    for M in (2, 5, 10):
        for t in (0.25, 1.0):
            assert alpha_n(white, 1, t) <= math.exp(M * t) * 2 * big_gamma(white, t) * K_M(white, M) / M


def test_second_moment_series(riesz):
    assert second_moment_series(riesz, 1.0, 0).partial_sum == 1.0
    assert second_moment_series(riesz, 1.0, 1).partial_sum == pytest.approx(1 + phi(riesz, 1.0), rel=1e-6)
    rep = second_moment_series(riesz, 1.0, 3)
    assert rep.partial_sum == pytest.approx(1.6733811263445297, rel=1e-6)
    assert rep.tail_bound < 0.05
    with pytest.raises(ValueError):
        second_moment_series(riesz, 1.0, 4)


@pytest.mark.parametrize("T", [0.5, 1.0, 2.0])
def test_constants_goldens_and_minimality(riesz, white, T):
    M1, C1, M2, C2 = CONSTANTS_RIESZ[T]
    rep = d_norm_constant(riesz, T)
    assert (rep.M_T, rep.M_T_prime) == (M1, M2)
    assert rep.C_T == pytest.approx(C1, rel=1e-10) and rep.C_T_dprime == pytest.approx(C2, rel=1e-10)
    assert rep.C_T == pytest.approx(2 * math.pi * T * math.exp(2 * M1 * T) * math.e**2, rel=1e-14)
    for m in (riesz, white):
        r = d_norm_constant(m, T)
        assert r.ratio_T < 0.5 and r.ratio_T_prime < 0.5
        # minimality witness: halving the rate breaks the ratio condition
        if r.M_T > 2:
            assert r.ratio_half_T >= 0.5
        if r.M_T_prime > 2:
            assert r.ratio_half_T_prime >= 0.5
        assert r.C_T > 0 and r.C_T_prime > 0 and r.C_T_dprime > 0


def test_first_order_derivative_norm_instances(riesz):
    rep = d_norm_constant(riesz, 1.0)
    assert rep.ok
    for o in rep.orders:
        if o["n"] == 1:
            assert o["lhs"] == pytest.approx((1.0 - o["r"]) / 2)


def test_d_norm_order2_positive_and_vanishing(riesz, white):
    for m in (riesz, white):
        vals = [d_norm_order2(m, 1.0, r) for r in (0.1, 0.5, 0.9)]
        assert all(v > 0 for v in vals)
        assert vals[0] > vals[1] > vals[2]
        assert d_norm_order2(m, 1.0, 1.0) == 0.0


def test_d2_instance_matches_grid_oracle(riesz):
    rep = d2_norm_constant(riesz, 1.0)
    assert rep.ok
    # int int |2 f~_2(theta, w, r, z, 1, 0)|^2 dw dz by a midpoint grid over [-1, 1]^2
    n = 800
    c = -1 + (np.arange(n) + 0.5) * 2 / n
    for o in rep.orders:
        th, r = o["theta"], o["r"]
        grid = [[2 * f_tilde_eval(2, [(th, w), (r, z)], 1.0, 0.0) for z in c] for w in c]
        oracle = np.sum(np.square(grid)) * (2 / n) ** 2
        assert o["lhs"] == pytest.approx(oracle, abs=5e-3)


def test_scan_exhaustion_raises(riesz):
    # the admissible rate grows with T and passes 2^20 for this horizon
    with pytest.raises(ScanExhausted, match="no admissible M"):
        scan_M(riesz, 1e40, 3)


def test_constants_table(riesz):
    tab = constants_table(riesz, 1.0)
    assert tab.M_T == 8.0 and tab.c0 == pytest.approx(c0(riesz))
    assert tab.big_gamma_T == pytest.approx(1.5)


@settings(max_examples=8)
@given(st.floats(0.2, 1.5), st.sampled_from([1, 2, 3]))
def test_alpha_self_similarity(t, n):
    # G and both covariances are homogeneous, so alpha_n(t) = alpha_n(1) t^(n (2H + alpha + 1))
    m = CovarianceModel()
    expo = n * (2 * m.hurst + m.riesz_alpha + 1)
    assert alpha_n(m, n, t) == pytest.approx(alpha_n(m, n, 1.0) * t**expo, rel=1e-8)
