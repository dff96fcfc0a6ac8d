import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rieszlab import DomainError, GridField, ParameterError, RieszParams
from rieszlab.diagnostics import (calibrate_me_constant, fi_ratio, me_lower_bound, modulated_energy,
                                  modulated_free_energy, nn_scales, relative_entropy_product,
                                  transport_variation, truncated_modulated_energy)
from rieszlab.grid import grid_points
from rieszlab.particles import ParticleConfig, initial_config, wrap
from rieszlab.pde import initial_profile
from rieszlab.riesz import riesz_fourier_coeff

P0 = RieszParams(1, 0.0)
UNIFORM = GridField.constant(1.0, 64, 1)


def cos_mu(eps=0.3, n=64):
    return initial_profile(dict(name="single_mode", eps=eps, k=1), n, 1)


def vfield(n=64, a=0.2, b=0.1):
    x = np.linspace(-0.5, 0.5, n, endpoint=False)
    return GridField(np.array([a * np.sin(2 * np.pi * x) + b * np.cos(4 * np.pi * x)]), 1)


def test_two_antipodal_particles(log_table):
    b = modulated_energy(ParticleConfig(np.array([[-0.25], [0.25]]), P0), UNIFORM, log_table)
    assert b.F_N == pytest.approx(-math.log(2) / 4, abs=1e-14)
    assert b.cross == 0.0 and b.self_mu == 0.0


def test_equispaced_closed_form(log_table):
    N = 10
    x = (-0.5 + np.arange(N) / N)[:, None]
    b = modulated_energy(ParticleConfig(x, P0), UNIFORM, log_table)
    assert b.F_N == pytest.approx(-math.log(N) / (2 * N), abs=1e-14)


@pytest.mark.parametrize("s", [0.0, 0.5, -0.5])
def test_cross_and_self_single_mode(table_factory, s):
    p = RieszParams(1, s)
    mu = cos_mu()
    cfg = initial_config(p, 50, 3, 0, mu)
    b = modulated_energy(cfg, mu, table_factory(1, s))
    gh = riesz_fourier_coeff(1, p)
    assert b.cross == pytest.approx(2 * np.mean(0.3 * gh * np.cos(2 * np.pi * cfg.positions[:, 0])), abs=1e-14)
    assert b.self_mu == pytest.approx(2 * 0.15**2 * gh, abs=1e-15)
    assert b.F_N == pytest.approx(0.5 * (b.pair_sum - b.cross + b.self_mu), abs=1e-15)


def test_permutation_and_translation_invariance(table_factory):
    p = RieszParams(1, 0.5)
    tab = table_factory(1, 0.5)
    mu = cos_mu()
    cfg = initial_config(p, 40, 1, 0, mu)
    b = modulated_energy(cfg, mu, tab)
    perm = ParticleConfig(cfg.positions[::-1], p)
    assert modulated_energy(perm, mu, tab).F_N == pytest.approx(b.F_N, abs=1e-13)
    shift = 8 / 64  # a whole number of grid cells keeps mu exactly representable
    moved = ParticleConfig(wrap(cfg.positions + shift), p)
    mu_moved = GridField(np.roll(mu.values, 8), 1)
    assert modulated_energy(moved, mu_moved, tab).F_N == pytest.approx(b.F_N, abs=1e-12)


def test_kmax_stability_band_limited(table_factory):
    p = RieszParams(1, 0.5)
    tab = table_factory(1, 0.5)
    mu = cos_mu()
    cfg = initial_config(p, 40, 2, 0, mu)
    assert modulated_energy(cfg, mu, tab, 4).F_N == pytest.approx(modulated_energy(cfg, mu, tab, 8).F_N, abs=1e-8)


def test_nn_scales():
    x = np.array([[-0.4], [-0.3], [0.2]])
    sc = nn_scales(ParticleConfig(x, P0), UNIFORM)
    assert sc.cap == pytest.approx(0.25 / 3)
    assert np.allclose(sc.r, 0.25 * np.minimum([0.1, 0.1, 0.4], 1 / 3))


def test_lower_bound_scaling():
    cfg = ParticleConfig(np.array([[-0.25], [0.25]]), RieszParams(1, 0.5))
    m1 = GridField.constant(1.0, 16, 1)
    m2 = GridField(np.r_[np.full(8, 2.0), np.zeros(8)], 1)
    assert me_lower_bound(cfg, m2, 1.0) == pytest.approx(2**0.5 * me_lower_bound(cfg, m1, 1.0), rel=1e-14)


def test_calibration_makes_bound_hold(log_table):
    bds = [modulated_energy(initial_config(P0, 32, 0, k), UNIFORM, log_table) for k in range(30)]
    C = calibrate_me_constant(bds)
    assert all(b.shifted(C) >= 0 for b in bds)


def test_truncated_converges(table_factory):
    p = RieszParams(1, 0.5)
    tab = table_factory(1, 0.5)
    mu = cos_mu()
    cfg = initial_config(p, 50, 3, 0, mu)
    F = modulated_energy(cfg, mu, tab).F_N
    diffs = [abs(truncated_modulated_energy(cfg, mu, e, tab) - F) for e in (1e-5, 1e-7, 1e-9)]
    # leading error is C_eta ~ eta^{d-s}
    assert diffs[2] < diffs[1] < diffs[0]
    assert diffs[1] / diffs[2] == pytest.approx(10.0, rel=0.05)


def test_truncated_finite_for_coincident(log_table):
    cfg = ParticleConfig(np.array([[0.1], [0.1], [-0.2]]), P0)
    val = truncated_modulated_energy(cfg, UNIFORM, 0.05, log_table)
    assert np.isfinite(val)
    with pytest.raises(ParameterError):
        truncated_modulated_energy(cfg, UNIFORM, 0.3, log_table)


def test_relative_entropy():
    mu = cos_mu(0.3)
    assert relative_entropy_product(mu, mu) == pytest.approx(0.0, abs=1e-16)
    rho = cos_mu(0.1)
    ref = float(np.mean(rho.values * np.log(rho.values / mu.values)))
    assert relative_entropy_product(rho, mu) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(DomainError):
        relative_entropy_product(mu, GridField(np.r_[np.zeros(32), np.full(32, 2.0)], 1))


def test_modulated_free_energy():
    assert modulated_free_energy(0.2, -0.01, 0.25) == pytest.approx(0.04)


@pytest.mark.parametrize("s", [0.0, 0.5, -0.5])
def test_transport_variation_is_derivative_along_pushforward(table_factory, s):
    """I = 2 dF_N/dt for x -> x + t v(x) applied to particles and to mu."""
    p = RieszParams(1, s)
    tab = table_factory(1, s)
    mu = cos_mu()
    cfg = initial_config(p, 50, 3, 0, mu)
    v = vfield()
    I = transport_variation(cfg, mu, v, tab)
    xs = np.linspace(-0.5, 0.5, 64, endpoint=False)

    def vx(y):
        return 0.2 * np.sin(2 * np.pi * y) + 0.1 * np.cos(4 * np.pi * y)

    def dvx(y):
        return 0.4 * np.pi * np.cos(2 * np.pi * y) - 0.4 * np.pi * np.sin(4 * np.pi * y)

    def F(t):
        xn = wrap(cfg.positions[:, 0] + t * vx(cfg.positions[:, 0]))
        z = xs.copy()
        for _ in range(60):
            z = z - (z + t * vx(z) - xs) / (1 + t * dvx(z))
        mut = (1 + 0.3 * np.cos(2 * np.pi * z)) / (1 + t * dvx(z))
        return modulated_energy(ParticleConfig(xn[:, None], p), GridField(mut, 1), tab).F_N

    h = 1e-4
    assert I == pytest.approx(2 * (F(h) - F(-h)) / (2 * h), rel=1e-5, abs=1e-9)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-0.5, 0.5))
@settings(max_examples=10, deadline=None)
def test_transport_linear_and_shift_invariant(a, b, c):
    from rieszlab.riesz import build_table

    tab = _cache.setdefault("t", build_table(RieszParams(1, 0.5)))
    p = tab.params
    mu = cos_mu()
    cfg = initial_config(p, 20, 4, 0, mu)
    v1, v2 = vfield(a=0.2, b=0.0), vfield(a=0.0, b=0.1)
    lhs = transport_variation(cfg, mu, GridField(a * v1.values + b * v2.values, 1), tab)
    rhs = a * transport_variation(cfg, mu, v1, tab) + b * transport_variation(cfg, mu, v2, tab)
    assert lhs == pytest.approx(rhs, abs=1e-10)
    shifted = GridField(v1.values + c, 1)
    assert transport_variation(cfg, mu, shifted, tab) == pytest.approx(transport_variation(cfg, mu, v1, tab),
                                                                        abs=1e-10)


_cache = {}


def test_fi_ratio(log_table):
    cfg = initial_config(P0, 64, 1)
    zero = GridField(np.zeros((1, 64)), 1)
    assert fi_ratio(cfg, UNIFORM, zero, log_table, 1.0).ratio == 0.0
    r = fi_ratio(cfg, UNIFORM, vfield(), log_table, 5.0)
    assert np.isfinite(r.ratio) and r.ratio > 0 and not r.calibration_flag
    flagged = fi_ratio(cfg, UNIFORM, vfield(), log_table, -100.0)
    assert flagged.calibration_flag


def test_transport_variation_d2(table_factory):
    p = RieszParams(2, 1.0)
    tab = table_factory(2, 1.0)
    mu = initial_profile(dict(name="random_band", seed=1, kmax=2, eps=0.3), 16, 2)
    cfg = initial_config(p, 30, 2, 0, mu)
    x = grid_points(16, 2)
    v = GridField(np.stack([0.1 * np.sin(2 * np.pi * x[..., 1]), 0.1 * np.cos(2 * np.pi * x[..., 0])]), 2)
    I1 = transport_variation(cfg, mu, v, tab)
    I2 = transport_variation(cfg, mu, GridField(2 * v.values, 2), tab)
    assert I2 == pytest.approx(2 * I1, rel=1e-12)


def test_single_particle_uniform_is_zero(log_table):
    b = modulated_energy(ParticleConfig(np.array([[0.3]]), P0), UNIFORM, log_table)
    assert b.F_N == pytest.approx(0.0, abs=1e-15)


def test_truncation_audit_at_nn_scales(table_factory):
    """eta = r_i, r_i/2, r_i/4 on 50 configs: the gap to F_N shrinks."""
    p = RieszParams(1, 0.5)
    tab = table_factory(1, 0.5)
    mu = cos_mu()
    for c in range(50):
        cfg = initial_config(p, 32, 5, c, mu)
        F = modulated_energy(cfg, mu, tab).F_N
        r = nn_scales(cfg, mu).r
        vals = [truncated_modulated_energy(cfg, mu, r / k, tab) for k in (1, 2, 4)]
        gaps = [abs(v - F) for v in vals]
        assert gaps[2] < gaps[0]
