"""N-particle Riesz dynamics on the torus with Euler-Maruyama time stepping.

    dx_i = (1/N) sum_{j != i} M grad g(x_i - x_j) dt + sqrt(2 sigma) dW_i

Forces are direct O(N^2) sums over minimum-image displacements (see
:mod:`rieszlab.kernels`). Noise comes from counter-based Philox streams keyed
by ``(seed, replica)`` with the step index in the counter, so every replica
and every step has its own reproducible block of normals, independent of the
order in which replicas are run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import ParameterError, SingularityError
from .grid import GridField

__all__ = [
    "ParticleConfig",
    "NoiseStream",
    "wrap",
    "min_pair_distance",
    "nearest_neighbor_distances",
    "default_eps_reg",
    "pairwise_force",
    "interaction_energy",
    "em_step",
    "empirical_fourier",
    "sample_density",
    "initial_config",
    "simulate",
    "run_ensemble",
    "EnsembleResult",
]


def wrap(x):
    """Map coordinates into ``[-1/2, 1/2)``."""
    x = np.asarray(x, dtype=float)
    out = x - np.floor(x + 0.5)
    # x + 0.5 can round up to an integer for x just below 1/2
    out[out >= 0.5] -= 1.0
    return out


def _periodic_tree(x):
    return cKDTree(np.mod(x + 0.5, 1.0) % 1.0, boxsize=1.0)


def nearest_neighbor_distances(x):
    """Distance from each particle to its nearest other particle (minimum image)."""
    x = np.atleast_2d(x)
    if x.shape[0] < 2:
        return np.full(x.shape[0], np.inf)
    dist, _ = _periodic_tree(x).query(np.mod(x + 0.5, 1.0) % 1.0, k=2)
    return dist[:, 1]


def min_pair_distance(x):
    return float(nearest_neighbor_distances(x).min()) if len(x) > 1 else math.inf


@dataclass(frozen=True, eq=False)
class ParticleConfig:
    """Positions ``(N, d)`` in ``[-1/2, 1/2)^d`` with run metadata."""

    positions: np.ndarray
    params: object
    t: float = 0.0
    seed: int = 0
    replica_id: int = 0
    step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.params.d:
            raise ParameterError(f"positions must have {self.params.d} columns")
        if np.any(x < -0.5) or np.any(x >= 0.5):
            raise ParameterError("coordinates must lie in [-1/2, 1/2)")
        x.setflags(write=False)
        object.__setattr__(self, "positions", x)

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def d(self):
        return self.positions.shape[1]

    def check_distinct(self):
        if self.N > 1 and min_pair_distance(self.positions) <= 0:
            raise SingularityError("coincident particles")
        return self

    def moved(self, positions, dt):
        return replace(self, positions=positions, t=self.t + dt, step=self.step + 1)


class NoiseStream:
    """Standard normals for replica ``replica`` of run ``seed``.

    Block ``k`` is drawn from a fresh Philox generator with key
    ``(seed, replica)`` and counter ``(0, k, 0, 0)``; each block is far
    smaller than the 2^64 counter gap, so blocks never overlap.
    """

    def __init__(self, seed, replica=0):
        self.key = np.array([int(seed) & (2**64 - 1), int(replica) & (2**64 - 1)], dtype=np.uint64)

    def generator(self, block, lane=0):
        counter = np.array([lane, block, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self.key, counter=counter))

    def normals(self, block, shape):
        return self.generator(block).standard_normal(shape)

    def init_generator(self):
        """Separate lane used for initial positions."""
        return self.generator(0, lane=1)


def default_eps_reg(N, d, mu_inf=1.0):
    """``(N ||mu||_inf)^{-1/d} / 8``."""
    return (N * mu_inf) ** (-1.0 / d) / 8.0


def _coincident(x):
    return np.unique(x, axis=0).shape[0] < x.shape[0]


def pairwise_force(config, table, eps_reg=0.0):
    """``(1/N) sum_{j != i} M grad g_eps(x_i - x_j)`` for every particle.

    With ``eps_reg > 0`` the Euclidean part is blended to zero inside
    ``|x| < eps_reg/16`` by a quintic smoothstep that is exactly 1 beyond
    ``eps_reg/8``; the smooth part of ``g`` is kept unchanged.
    """
    x = config.positions
    if eps_reg == 0.0 and _coincident(x):
        raise SingularityError("coincident particles with eps_reg = 0")
    raw = kernels.pair_forces(x, *table.kernel_args, float(eps_reg))
    return raw @ np.asarray(config.params.flow).T / config.N


def interaction_energy(config, table):
    """``(1/(2 N^2)) sum_{i != j} g(x_i - x_j)``."""
    val = kernels.pair_energy(config.positions, *table.kernel_args)
    if np.isnan(val):
        raise SingularityError("coincident particles")
    return val / config.N**2


def em_step(config, dt, noise, table, eps_reg=0.0, interaction=True):
    """One Euler-Maruyama step; ``noise`` is a NoiseStream or an ``(N, d)`` array."""
    if dt <= 0:
        raise ParameterError("dt must be positive")
    x = config.positions
    drift = pairwise_force(config, table, eps_reg) if interaction else 0.0
    sigma = config.params.sigma
    if sigma > 0:
        xi = noise.normals(config.step, x.shape) if isinstance(noise, NoiseStream) else np.asarray(noise)
        x = x + dt * drift + math.sqrt(2.0 * sigma * dt) * xi
    else:
        x = x + dt * drift
    return config.moved(wrap(x), dt)


def empirical_fourier(config, kmax):
    """``(1/N) sum_i exp(-2 pi i xi . x_i)`` on the centred cube ``|xi|_inf <= kmax``.

    Returns an array of shape ``(2 kmax + 1,) * d`` indexed by ``xi + kmax``.
    """
    x = config.positions if isinstance(config, ParticleConfig) else np.atleast_2d(config)
    ks = np.arange(-kmax, kmax + 1)
    E = [np.exp(-2j * np.pi * np.outer(x[:, a], ks)) for a in range(x.shape[1])]
    N = x.shape[0]
    if x.shape[1] == 1:
        return E[0].sum(axis=0) / N
    if x.shape[1] == 2:
        return E[0].T @ E[1] / N
    return np.einsum("ia,ib,ic->abc", *E) / N


# -- sampling ----------------------------------------------------------------------------------

def sample_density(mu, N, rng):
    """I.i.d. samples from a grid density.

    d = 1 inverts the CDF of the piecewise-linear interpolant exactly; d = 2
    uses rejection against its bilinear interpolant.
    """
    v = np.maximum(mu.values, 0.0)
    n, d = mu.n, mu.d
    if d == 1:
        f0 = v
        f1 = np.roll(v, -1)
        cell = 0.5 * (f0 + f1) / n
        cdf = np.concatenate([[0.0], np.cumsum(cell)])
        u = rng.uniform(0.0, cdf[-1], N)
        j = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, n - 1)
        rem = (u - cdf[j]) * n  # mass inside cell in units of h
        a = 0.5 * (f1[j] - f0[j])
        b = f0[j]
        with np.errstate(invalid="ignore", divide="ignore"):
            disc = np.sqrt(np.maximum(b * b + 4 * a * rem, 0.0))
            frac = np.where(np.abs(a) > 1e-14 * np.maximum(b, 1e-300), 2 * rem / (b + disc), rem / b)
        x = -0.5 + (j + np.clip(frac, 0.0, 1.0)) / n
        return wrap(x)[:, None]
    if d == 2:
        top = v.max()
        out = np.empty((0, 2))
        while out.shape[0] < N:
            m = max(2 * (N - out.shape[0]), 64)
            prop = rng.uniform(-0.5, 0.5, (m, 2))
            acc = rng.uniform(0.0, top, m) < _bilinear(v, prop)
            out = np.vstack([out, prop[acc]])
        return wrap(out[:N])
    raise ParameterError("sampling supports d = 1 and d = 2")


def _bilinear(v, pts):
    n = v.shape[0]
    t = (pts + 0.5) * n
    i = np.floor(t).astype(np.int64)
    f = t - i
    i0 = i % n
    i1 = (i + 1) % n
    return ((1 - f[:, 0]) * (1 - f[:, 1]) * v[i0[:, 0], i0[:, 1]] + f[:, 0] * (1 - f[:, 1]) * v[i1[:, 0], i0[:, 1]]
            + (1 - f[:, 0]) * f[:, 1] * v[i0[:, 0], i1[:, 1]] + f[:, 0] * f[:, 1] * v[i1[:, 0], i1[:, 1]])


def initial_config(params, N, seed, replica=0, mu0=None):
    """I.i.d. initial positions drawn from the replica's init lane."""
    rng = NoiseStream(seed, replica).init_generator()
    if mu0 is None:
        x = wrap(rng.uniform(-0.5, 0.5, (N, params.d)))
    else:
        x = sample_density(mu0, N, rng)
    return ParticleConfig(x, params, 0.0, seed, replica)


# -- trajectories ------------------------------------------------------------------------------

def simulate(config, table, dt, record_times, eps_reg=0.0, interaction=True, kmax=None, keep_positions=True):
    """Integrate one replica and record at the requested times.

    Returns a dict with ``times``, ``positions`` (list, if kept), ``fourier``
    (list of empirical coefficient blocks, if ``kmax`` is given), ``status``
    ("ok" or the failure message) and ``final``.
    """
    noise = NoiseStream(config.seed, config.replica_id)
    times, positions, blocks = [], [], []
    status = "ok"

    def rec(cfg):
        times.append(cfg.t)
        if keep_positions:
            positions.append(np.array(cfg.positions))
        if kmax is not None:
            blocks.append(empirical_fourier(cfg, kmax))

    cfg = config
    for target in sorted(float(t) for t in record_times):
        try:
            while cfg.t < target - 1e-12 * max(1.0, target):
                h = min(dt, target - cfg.t)
                cfg = em_step(cfg, h, noise, table, eps_reg, interaction)
                if not np.all(np.isfinite(cfg.positions)):
                    raise FloatingPointError("non-finite positions")
            cfg = replace(cfg, t=target)
        except (SingularityError, FloatingPointError) as exc:
            status = f"blow-up at t={cfg.t:.6g}: {exc}"
            break
        rec(cfg)
    return dict(times=times, positions=positions, fourier=blocks, status=status, final=cfg)


@dataclass
class EnsembleResult:
    runs: list
    seed: int
    replicas: int

    @property
    def survived(self):
        return [r for r in self.runs if r["status"] == "ok"]

    @property
    def survival_count(self):
        return len(self.survived)

    def mean_fourier(self):
        """Replica mean of the recorded coefficient blocks (surviving runs)."""
        blocks = [np.stack(r["fourier"]) for r in self.survived]
        return np.mean(blocks, axis=0)


def run_ensemble(params, N, replicas, dt, record_times, table, seed=0, mu0=None, eps_reg=0.0,
                 interaction=True, kmax=None, keep_positions=True):
    """Independent replicas with streams derived from ``(seed, replica)``.

    Blow-ups are recorded per replica (``status``) rather than raised.
    """
    if replicas < 1:
        raise ParameterError("replicas must be >= 1")
    runs = []
    for r in range(replicas):
        cfg = initial_config(params, N, seed, r, mu0)
        runs.append(simulate(cfg, table, dt, record_times, eps_reg, interaction, kmax, keep_positions))
    return EnsembleResult(runs, seed, replicas)
