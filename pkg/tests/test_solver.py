import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoswave import kernels
from chaoswave.model import CovarianceModel, WaveKernel
from chaoswave.noise import GridError, GridSpec, NoiseSample, cell_covariance, factorize, standard_normals
from chaoswave.solver import (EPS_Q, cone_cell_area, delta_scan, density_report, malliavin_batch,
                              malliavin_sample, mc_second_moment, modulus_g, partition_approximant,
                              picard_consistency, project_kernels, psi_grid, sample_field, sample_solution,
                              solution_batch)

SMALL = GridSpec(1.0, 1.0, 4, 4)


def _zero_noise(grid):
    return NoiseSample(np.zeros((grid.nt, grid.nx)), np.zeros((grid.nt, grid.nx)), 0, 0)


@settings(max_examples=40)
@given(st.floats(0.0, 1.0), st.floats(0.05, 0.5), st.floats(-1.0, 1.0), st.floats(0.05, 0.5),
       st.floats(0.1, 1.5), st.floats(-0.5, 0.5))
def test_cone_area_matches_midpoint_oracle(a0, wa, b0, wb, pt, px):
    exact = float(cone_cell_area(a0, a0 + wa, b0, b0 + wb, pt, px))
    n = 400
    s = a0 + (np.arange(n) + 0.5) * wa / n
    y = b0 + (np.arange(n) + 0.5) * wb / n
    S, Y = np.meshgrid(s, y, indexing="ij")
    inside = (S < pt) & (np.abs(Y - px) < pt - S)
    oracle = inside.mean() * wa * wb
    assert exact == pytest.approx(oracle, abs=4 * wa * wb / n)


def test_psi_grid_exact():
    for t in (0.5, 1.0, 2.0):
        assert psi_grid(t) == pytest.approx(kernels.psi(t), abs=1e-12)


def test_order1_tensor_is_transformed_cell_average(riesz):
    grid = GridSpec(1.0, 1.0, 6, 6)
    co = project_kernels(riesz, grid, 1.0, 0.0, 1)
    # cell averages of G(1 - s, -y) by a fine midpoint rule
    k = 40
    te, xe = grid.time_edges(), grid.space_edges()
    F = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            s = te[i] + (np.arange(k) + 0.5) * grid.dt / k
            y = xe[j] + (np.arange(k) + 0.5) * grid.dx / k
            F[i, j] = WaveKernel.G(1.0 - s[:, None], -y[None, :]).mean()
    T = (co.cov.L_time.T @ F @ co.cov.L_space).ravel()
    assert np.allclose(co.tensors[0], T, atol=2e-3)


def test_tensors_symmetric_and_diagonal_free(riesz):
    co = project_kernels(riesz, SMALL, 1.0, 0.0, 3)
    T2, T3 = co.tensors[1], co.tensors[2]
    assert np.allclose(T2, T2.T, atol=1e-15)
    for p in itertools.permutations(range(3)):
        assert np.allclose(T3, T3.transpose(p), atol=1e-15)
    idx = np.arange(co.m)
    assert np.all(T2[idx, idx] == 0)
    assert np.all(T3[idx, idx, :] == 0) and np.all(T3[idx, :, idx] == 0) and np.all(T3[:, idx, idx] == 0)


def test_project_rejects_bad_inputs(riesz):
    with pytest.raises(GridError):
        project_kernels(riesz, GridSpec(1.0, 1.0, 12, 12), 1.0, 0.0, 3)
    with pytest.raises(GridError):
        project_kernels(riesz, SMALL, 1.0, 0.5, 1)
    with pytest.raises(ValueError):
        project_kernels(riesz, SMALL, 1.0, 0.0, 4)


def test_order1_consistency_16(riesz):
    co = project_kernels(riesz, GridSpec(1.0, 1.0, 16, 16), 1.0, 0.0, 1)
    assert co.norms2()[0] == pytest.approx(kernels.alpha_n(riesz, 1, 1.0), rel=0.01)


def test_zero_noise_gives_one(riesz):
    co = project_kernels(riesz, SMALL, 1.0, 0.0, 3)
    s = sample_solution(co, _zero_noise(SMALL))
    assert s.value == 1.0 and s.contributions == (0.0, 0.0, 0.0)


def test_solution_decomposes(riesz):
    co = project_kernels(riesz, SMALL, 1.0, 0.0, 3)
    Z = standard_normals(4, 50, (4, 4))
    u, I = solution_batch(co, Z)
    assert np.allclose(u, 1 + I.sum(axis=1), atol=1e-14)
    # second order by the explicit diagonal-free double sum
    z = Z[0].ravel()
    T2 = co.tensors[1]
    direct = sum(T2[a, b] * z[a] * z[b] for a in range(16) for b in range(16) if a != b) / math.sqrt(2)
    assert I[0, 1] == pytest.approx(direct, abs=1e-13)


def test_gradient_matches_finite_differences(riesz):
    co = project_kernels(riesz, SMALL, 1.0, 0.0, 3)
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(20):
        z = rng.standard_normal(co.m)
        grad, _, _ = malliavin_batch(co, z[None])
        E = np.eye(co.m) * h
        up, _ = solution_batch(co, z[None] + E)
        dn, _ = solution_batch(co, z[None] - E)
        fd = (up - dn) / (2 * h)
        assert np.max(np.abs(grad[0] - fd)) <= 1e-6 * np.max(np.abs(fd))


def test_first_order_density_is_green_function(riesz):
    grid = GridSpec(1.0, 1.0, 8, 8)
    co = project_kernels(riesz, grid, 1.0, 0.0, 1)
    ms = malliavin_sample(co, NoiseSample(np.ones((8, 8)), np.ones((8, 8)), 0, 0))
    # interior cells of the cone carry G = 1/2, cells outside carry 0
    assert ms.density[0, 3] == pytest.approx(0.5, abs=1e-10)
    assert ms.density[7, 0] == pytest.approx(0.0, abs=1e-10)


def test_first_order_refinement_chain(riesz):
    a1 = kernels.alpha_n(riesz, 1, 1.0)
    q_gap, v_gap = [], []
    for n in (8, 16, 32):
        grid = GridSpec(1.0, 1.0, n, n)
        co = project_kernels(riesz, grid, 1.0, 0.0, 1)
        _, _, Q = malliavin_batch(co, np.zeros((1, n, n)))
        q_gap.append(abs(Q[0] / kernels.psi(1.0) - 1))
        v_gap.append(abs(co.norms2()[0] / a1 - 1))
    for gaps in (q_gap, v_gap):
        assert gaps[0] >= 1.5 * gaps[1] and gaps[1] >= 1.5 * gaps[2]


def test_zero_coordinates_keep_first_order_only(riesz):
    co2 = project_kernels(riesz, SMALL, 1.0, 0.0, 2)
    co1 = project_kernels(riesz, SMALL, 1.0, 0.0, 1)
    a = malliavin_sample(co2, _zero_noise(SMALL))
    b = malliavin_sample(co1, _zero_noise(SMALL))
    assert np.allclose(a.density, b.density, atol=1e-15)


def test_expected_Q_below_uniform_bound(riesz):
    grid = GridSpec(1.0, 1.0, 8, 8)
    co = project_kernels(riesz, grid, 1.0, 0.0, 2)
    _, _, Q = malliavin_batch(co, standard_normals(9, 10_000, (8, 8)))
    C = kernels.d_norm_constant(riesz, 1.0).C_T
    assert Q.mean() <= 1.0 * C


@pytest.mark.parametrize("N", [1, 2, 3])
def test_picard_identity(riesz, N):
    grid = SMALL if N == 3 else GridSpec(1.0, 1.0, 8, 8)
    assert picard_consistency(riesz, grid, N) <= 1e-10


def test_mc_second_moment(riesz):
    rep0 = mc_second_moment(riesz, SMALL, 1.0, 0.0, 0, 10, 1)
    assert rep0.mc_mean == 1.0 and rep0.mc_se == 0.0
    rep = mc_second_moment(riesz, GridSpec(1.0, 1.0, 8, 8), 1.0, 0.0, 1, 100_000, 5)
    assert abs(rep.z_discrete) <= 3
    with pytest.raises(ValueError):
        mc_second_moment(riesz, SMALL, 1.0, 0.0, 1, 100, 1)


def test_density_report_degenerate_and_masses():
    rep = density_report(np.ones(20_000))
    assert rep.atom_flagged and rep.atom_mass == 1.0
    rng = np.random.default_rng(1)
    u = rng.normal(1.0, 0.5, 20_000)
    rep = density_report(u, exact=(1.0, 0.25))
    assert rep.excluded_mass + rep.away_mass == pytest.approx(1.0)
    assert not rep.atom_flagged and rep.atom_mass < 0.01
    assert rep.ks_stat <= rep.ks_critical
    assert list(rep.truncation_mass.values()) == sorted(rep.truncation_mass.values(), reverse=True)
    with pytest.raises(ValueError):
        density_report(np.ones(10))


def test_modulus(riesz):
    grid = GridSpec(1.0, 1.5, 6, 18)
    assert modulus_g(riesz, grid, 1.0, 0.0, 0.0, 100).value == 0.0
    lo = modulus_g(riesz, grid, 1.0, 0.0, 0.1, 4000, seed=2)
    hi = modulus_g(riesz, grid, 1.0, 0.0, 0.4, 4000, seed=2)
    assert lo.value <= hi.value + 3 * hi.se
    assert lo.value == pytest.approx(lo.exact, abs=4 * lo.se + 0.05 * lo.exact)
    with pytest.raises(ValueError):
        modulus_g(riesz, grid, 1.0, 0.0, 1.2, 100)


def test_delta_scan_white_first_order_never_degenerate(white):
    grid = GridSpec(1.0, 1.5, 6, 18)
    rep = delta_scan(white, grid, 1.0, 0.0, 10, [0.4, 0.2, 0.1], 2000, N=1, modulus_samples=500)
    assert rep.p_small_Q == 0.0
    assert rep.eps == EPS_Q
    assert rep.gamma_delta[0] > rep.gamma_delta[1] > rep.gamma_delta[2]
    assert rep.gamma_delta[2] == pytest.approx(2 * 0.75 * 0.1**0.5)


def test_partition_constant_and_smooth():
    Xm, rep = partition_approximant(np.full((10, 16, 16), 3.0), 4)
    assert np.array_equal(Xm, np.full((10, 16, 16), 3.0)) and rep.exceedance == 0.0
    s = np.linspace(0, 1, 64)
    smooth = np.sin(np.add.outer(s, s))[None]
    _, rep = partition_approximant(smooth, 6)
    assert rep.exceedance == 0.0


def test_sample_field_matches_projection(riesz):
    grid = GridSpec(1.0, 2.0, 8, 16)
    times, points = [0.7, 1.0], [-0.3, 0.0, 0.45]
    F = sample_field(riesz, grid, 2, times, points, 300, seed=8)
    Z = standard_normals(8, 300, (grid.nt, grid.nx))
    for a, t in enumerate(times):
        for b, x in enumerate(points):
            u, _ = solution_batch(project_kernels(riesz, grid, t, x, 2), Z)
            assert np.allclose(F[:, a, b], u, atol=1e-12)
