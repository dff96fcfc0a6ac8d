"""Coupling functionals between particle configurations and densities.

All terms that involve the density ``mu`` are evaluated in Fourier space
against the exact empirical coefficients ``muhat_N(xi) = (1/N) sum_i
exp(-2 pi i xi . x_i)``, so no particle is ever deposited on a grid. For a
function ``f`` with coefficients ``fhat``,

    (1/N) sum_i f(x_i) = sum_xi fhat(xi) conj(muhat_N(xi)).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal, special

from . import kernels
from .errors import DomainError, ParameterError, SingularityError
from .grid import GridField, _nyquist_free, centered_coefficients, lp_norm
from .particles import ParticleConfig, empirical_fourier, nearest_neighbor_distances
from .riesz import riesz_fourier_coeff, truncation_constant, _unit_sphere_area

__all__ = [
    "ModEnergyBreakdown",
    "NnScales",
    "FiRatio",
    "modulated_energy",
    "nn_scales",
    "me_lower_bound",
    "calibrate_me_constant",
    "truncated_modulated_energy",
    "relative_entropy_product",
    "modulated_free_energy",
    "transport_variation",
    "fi_ratio",
]


def _lattice(K, d):
    ks = np.arange(-K, K + 1)
    return np.stack(np.meshgrid(*([ks] * d), indexing="ij"), axis=-1)


def _ghat_cube(params, K):
    return riesz_fourier_coeff(_lattice(K, params.d), params)


def _kmax(mu, kmax):
    return mu.n // 2 if kmax is None else min(int(kmax), mu.n // 2)


def _mu_inf(mu):
    return lp_norm(mu, np.inf)


def _offsets(params, N, mu_inf):
    s, d = params.s, params.d
    log_off = math.log(N * mu_inf) / (2 * d * N) if s == 0.0 else 0.0
    power = mu_inf ** (s / d) * N ** (s / d - 1.0)
    return log_off, power


@dataclass(frozen=True)
class ModEnergyBreakdown:
    """Pieces of ``F_N = (pair_sum - cross + self_mu) / 2``.

    ``log_offset`` is ``log(N ||mu||_inf) / (2 d N)`` for ``s = 0`` (else 0)
    and ``power_scale`` is ``||mu||_inf^{s/d} N^{s/d - 1}``; the lower bound
    reads ``F_N + log_offset + C * power_scale >= 0``.
    """

    pair_sum: float
    cross: float
    self_mu: float
    F_N: float
    log_offset: float
    power_scale: float
    N: int

    def offset(self, C_cal):
        return self.log_offset + C_cal * self.power_scale

    def shifted(self, C_cal):
        """``F_N`` plus both offsets (nonnegative when ``C_cal`` is large enough)."""
        return self.F_N + self.offset(C_cal)


def _positions(config):
    return config.positions if isinstance(config, ParticleConfig) else np.atleast_2d(config)


def modulated_energy(config, mu, table, kmax=None):
    """Modulated energy of ``config`` relative to the density ``mu``.

    Parameters
    ----------
    config : ParticleConfig
    mu : GridField
        Probability density on the grid.
    table : PotentialTable
    kmax : int, optional
        Fourier cut-off for the ``mu`` terms (default: the grid Nyquist).

    Raises
    ------
    SingularityError
        For coincident particles.
    """
    params = table.params
    x = _positions(config)
    N = x.shape[0]
    K = _kmax(mu, kmax)
    if N > 1:
        pe = kernels.pair_energy(x, *table.kernel_args)
        if np.isnan(pe):
            raise SingularityError("coincident particles")
        pair_sum = 2.0 * pe / N**2
    else:
        pair_sum = 0.0
    gh = _ghat_cube(params, K)
    mh = centered_coefficients(mu, K)
    nh = empirical_fourier(x, K)
    cross = 2.0 * float(np.sum(gh * (mh * np.conj(nh)).real))
    self_mu = float(np.sum(gh * np.abs(mh) ** 2))
    log_off, power = _offsets(params, N, _mu_inf(mu))
    F = 0.5 * (pair_sum - cross + self_mu)
    return ModEnergyBreakdown(pair_sum, cross, self_mu, F, log_off, power, N)


@dataclass(frozen=True)
class NnScales:
    r: np.ndarray
    cap: float


def nn_scales(config, mu):
    """``r_i = (1/4) min(dist to nearest neighbour, (N ||mu||_inf)^{-1/d})``."""
    x = _positions(config)
    N, d = x.shape
    cap = (N * _mu_inf(mu)) ** (-1.0 / d)
    nn = nearest_neighbor_distances(x) if N > 1 else np.array([np.inf])
    return NnScales(0.25 * np.minimum(nn, cap), 0.25 * cap)


def me_lower_bound(config, mu, C_cal, params=None):
    """``-log(N ||mu||_inf)/(2 d N) 1_{s=0} - C_cal ||mu||_inf^{s/d} N^{s/d-1}``."""
    params = params if params is not None else config.params
    N = _positions(config).shape[0]
    log_off, power = _offsets(params, N, _mu_inf(mu))
    return -log_off - C_cal * power


def calibrate_me_constant(breakdowns, safety=2.0):
    """Smallest admissible constant over ``breakdowns``, times ``safety``.

    Returns ``safety * max_k (-(F_N + log_offset) / power_scale)`` clipped
    at 0.
    """
    worst = max(-(b.F_N + b.log_offset) / b.power_scale for b in breakdowns)
    return safety * max(worst, 0.0)


def _second_moment(eta, params):
    """``int_{|y|<eta} (g_E(eta) - g_E(y)) |y|^2 dy``."""
    d, s = params.d, params.s
    area = _unit_sphere_area(d)
    if s == 0.0:
        return -area * eta ** (d + 2) / (d + 2) ** 2
    return -params.sign * area * eta ** (d + 2 - s) * s / ((d + 2) * (d + 2 - s))


def _eval_series(coef, K, x):
    """``sum_xi coef(xi) exp(2 pi i xi . x)`` at the rows of ``x`` (real part)."""
    ks = np.arange(-K, K + 1)
    E = [np.exp(2j * np.pi * np.outer(x[:, a], ks)) for a in range(x.shape[1])]
    if x.shape[1] == 1:
        return (E[0] @ coef).real
    if x.shape[1] == 2:
        return np.sum((E[0] @ coef) * E[1], axis=1).real
    return np.einsum("ia,ib,ic,abc->i", E[0], E[1], E[2], coef).real


def truncated_modulated_energy(config, mu, eta_vec, table, kmax=None):
    """Modulated energy with the kernel capped at ``g_E(eta_i)`` around particle ``i``.

    Pair and cross terms use the truncated kernel (shifted to zero mean),
    ``self_mu`` is unchanged. The cross-term correction is the convolution
    of the capped difference with ``mu``, expanded to second order in
    ``eta_i`` (error ``O(eta^{d+4-s} |D^4 mu|)``).
    """
    params = table.params
    x = _positions(config)
    N, d = x.shape
    eta = np.broadcast_to(np.asarray(eta_vec, dtype=float), (N,)).copy()
    if np.any(eta <= 0) or np.any(eta >= 0.25):
        raise ParameterError("eta_i must lie in (0, 1/4)")
    K = _kmax(mu, kmax)
    C = np.array([truncation_constant(e, params) for e in eta])
    m2 = np.array([_second_moment(e, params) for e in eta])
    raw = kernels.pair_energy_truncated(x, eta, *table.kernel_args)
    pair = (raw - (N - 1) * C.sum()) / N**2
    gh = _ghat_cube(params, K)
    mh = centered_coefficients(mu, K)
    nh = empirical_fourier(x, K)
    base = 2.0 * float(np.sum(gh * (mh * np.conj(nh)).real))
    k2 = np.sum(_lattice(K, d) ** 2, axis=-1)
    mu_at = _eval_series(mh, K, x)
    lap_at = _eval_series(-4 * np.pi**2 * k2 * mh, K, x)
    corr = (mu_at - 1.0) * C + 0.5 * lap_at * m2 / d
    cross = base + 2.0 * float(np.mean(corr))
    self_mu = float(np.sum(gh * np.abs(mh) ** 2))
    return 0.5 * (pair - cross + self_mu)


def relative_entropy_product(rho, mu):
    """``int rho log(rho / mu)`` by quadrature, as the nonnegative ``kl_div`` integrand."""
    r, m = rho.values, mu.values
    if np.any(r < 0) or np.any(m < 0):
        raise DomainError("densities must be nonnegative")
    if np.any((m <= 0) & (r > 0)):
        raise DomainError("rho is not absolutely continuous with respect to mu")
    return float(np.mean(special.kl_div(r, m)))


def modulated_free_energy(H_N, mean_F_N, sigma):
    """``sigma H_N + E[F_N]``."""
    return sigma * H_N + mean_F_N


def _vector_values(v, d):
    vals = v.values if isinstance(v, GridField) else np.asarray(v)
    if vals.ndim == d:
        vals = vals[None]
    return vals


def transport_variation(config, mu, v, table, kmax=None):
    """First variation of the modulated energy along the vector field ``v``.

    ``I = (1/N^2) sum_{i != j} (v(x_i) - v(x_j)) . grad g(x_i - x_j)
    - (2/N) sum_i [v(x_i) . (grad g * mu)(x_i) - (grad g * (v mu))(x_i)]
    + 2 int v . (grad g * mu) dmu``.

    ``v`` is a vector GridField on the same grid as ``mu``; it is evaluated
    at the particles through its trigonometric interpolant.
    """
    params = table.params
    x = _positions(config)
    N, d = x.shape
    K = _kmax(mu, kmax)
    vfield = v if isinstance(v, GridField) else GridField(_vector_values(v, d), d)
    if vfield.is_scalar:
        vfield = GridField(vfield.values[None], d)
    if vfield.n != mu.n:
        raise ParameterError("v and mu must share a grid")
    vh = centered_coefficients(vfield, K)  # (d, 2K+1, ...)
    mh = centered_coefficients(mu, K)
    lat = _lattice(K, d)
    gh = riesz_fourier_coeff(lat, params)
    grad_gh = [2j * np.pi * lat[..., a] * gh for a in range(d)]
    v_at = np.stack([_eval_series(vh[a], K, x) for a in range(d)], axis=1)

    if N > 1:
        pp = kernels.pair_transport(x, v_at, *table.kernel_args)
        if np.isnan(pp):
            raise SingularityError("coincident particles")
        pp /= N**2
    else:
        pp = 0.0
    nh = empirical_fourier(x, K)
    grad_conv_at = np.stack([_eval_series(grad_gh[a] * mh, K, x) for a in range(d)], axis=1)
    term_a = float(np.mean(np.sum(v_at * grad_conv_at, axis=1)))
    term_b = 0.0
    mu_term = 0.0
    for a in range(d):
        # coefficients of v_a * mu on |xi|_inf <= K (exact discrete convolution)
        full = signal.fftconvolve(vh[a], mh, mode="full")
        vm = full[tuple(slice(K, 3 * K + 1) for _ in range(d))]
        term_b += float(np.sum((grad_gh[a] * vm * np.conj(nh)).real))
        mu_term += float(np.sum((np.conj(vm) * grad_gh[a] * mh).real))
    return pp - 2.0 * (term_a - term_b) + 2.0 * mu_term


def _jacobian_sup(v):
    """``sup_x |Dv(x)|`` (Frobenius) of a vector field."""
    vals = v.values if not v.is_scalar else v.values[None]
    total = 0.0
    for comp in vals:
        total = total + sum(c * c for c in _grad_components(GridField(comp, v.d)))
    return float(np.sqrt(total).max())


def _grad_components(f):
    n, d = f.n, f.d
    spec = f.spectrum
    axes = tuple(range(-d, 0))
    return [np.fft.irfftn(2j * np.pi * k * spec, s=(n,) * d, axes=axes, norm="forward") for k in _nyquist_free(n, d)]


@dataclass(frozen=True)
class FiRatio:
    ratio: float
    I: float
    grad_v_inf: float
    denominator: float
    calibration_flag: bool


def fi_ratio(config, mu, v, table, C_cal, kmax=None, breakdown=None):
    """``|I| / (||grad v||_inf (F_N + offsets))``, the empirical inequality constant.

    A nonpositive bracket sets ``calibration_flag`` (``C_cal`` too small)
    and the ratio to ``inf``.
    """
    vfield = v if isinstance(v, GridField) else GridField(_vector_values(v, table.params.d), table.params.d)
    I = transport_variation(config, mu, vfield, table, kmax)
    if I == 0.0:
        return FiRatio(0.0, 0.0, 0.0, float("nan"), False)
    gv = _jacobian_sup(vfield)
    b = breakdown if breakdown is not None else modulated_energy(config, mu, table, kmax)
    bracket = b.shifted(C_cal)
    if bracket <= 0 or gv == 0:
        return FiRatio(float("inf"), I, gv, gv * bracket, True)
    return FiRatio(abs(I) / (gv * bracket), I, gv, gv * bracket, False)
