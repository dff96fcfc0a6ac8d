"""Pseudo-spectral solver for the mean-field equation

    d_t mu = -div(mu M grad(g * mu)) + sigma Lap mu

on the unit torus, with its entropy/energy diagnostics.

Time stepping is first-order exponential time differencing (ETD1): the heat
part is propagated exactly and the transport term is explicit,

    muhat' = e^{L dt} muhat + dt phi1(L dt) Nhat,   L = -4 pi^2 sigma |xi|^2,

with ``phi1(z) = (e^z - 1)/z``. The product ``mu * V`` is dealiased with
the 2/3 rule. The mean mode is never touched, so mass is conserved to
round-off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import BlowUpError, DomainError, FitError, ParameterError
from .grid import (GridField, _hermitian_weights, _k2, _nyquist_free, dealias_mask, derivative_norm,
                   grid_points, lp_norm, origin_phase, sobolev_seminorm, wavenumbers)
from .riesz import RieszParams, fourier_multiplier

__all__ = [
    "PdeConfig",
    "PdeState",
    "DiagnosticsRecord",
    "PdeRun",
    "initial_profile",
    "velocity_field",
    "step",
    "entropy",
    "energy",
    "free_energy",
    "dissipation",
    "record",
    "run",
    "fit_exp_rate",
    "derivative_decay_report",
    "RECORD_COLUMNS",
]

LOG_FLOOR = 1e-14


# -- spectral operators ------------------------------------------------------------------------

class _Ops:
    """Multipliers for one (params, n) pair; built once and cached."""

    def __init__(self, params, n):
        d = params.d
        self.d, self.n = d, n
        self.shape = (n,) * d
        self.axes = tuple(range(-d, 0))
        self.k2 = _k2(n, d)
        self.ghat = fourier_multiplier(params, n)
        self.ik = [2j * np.pi * k for k in _nyquist_free(n, d)]
        self.grad_g = [ik * self.ghat for ik in self.ik]
        self.L = -4.0 * np.pi**2 * params.sigma * self.k2
        self.mask = dealias_mask(n, d)
        self.M = np.array(params.flow)
        self.weights = _hermitian_weights(n, d)

    def irfft(self, spec):
        return np.fft.irfftn(spec, s=self.shape, axes=self.axes, norm="forward")

    def rfft(self, vals):
        return np.fft.rfftn(vals, axes=self.axes, norm="forward")

    def grad_g_conv(self, mu_spec):
        """Components of grad(g * mu) in physical space."""
        return np.stack([self.irfft(m * mu_spec) for m in self.grad_g])

    def drift(self, mu_spec):
        gg = self.grad_g_conv(mu_spec)
        return np.einsum("ab,b...->a...", self.M, gg)


@lru_cache(maxsize=32)
def _ops_cached(d, s, flow_bytes, sigma, n):
    flow = np.frombuffer(flow_bytes, dtype=float).reshape(d, d)
    return _Ops(RieszParams(d, s, flow, sigma), n)


def _ops(params, n):
    return _ops_cached(params.d, params.s, np.ascontiguousarray(params.flow).tobytes(), params.sigma, n)


# -- state and records -------------------------------------------------------------------------

RECORD_COLUMNS = ("t", "mass", "l1", "l2", "linf", "free_energy", "dissipation", "entropy", "energy",
                  "min_mu", "max_mu", "sobolev_h1", "grad_l2", "grad_linf", "hess_l2", "hess_linf")


@dataclass(frozen=True)
class DiagnosticsRecord:
    """Time-stamped scalars of one PDE state.

    ``l1, l2, linf`` are norms of ``mu - 1``; ``grad_*`` and ``hess_*`` are
    norms of the first and second derivative tensors of ``mu``.
    """

    t: float
    mass: float
    l1: float
    l2: float
    linf: float
    free_energy: float
    dissipation: float
    entropy: float
    energy: float
    min_mu: float
    max_mu: float
    sobolev_h1: float
    grad_l2: float
    grad_linf: float
    hess_l2: float
    hess_linf: float

    @property
    def lp_norms(self):
        return {1: self.l1, 2: self.l2, math.inf: self.linf}

    def row(self):
        return [getattr(self, c) for c in RECORD_COLUMNS]


@dataclass(frozen=True, eq=False)
class PdeState:
    mu: GridField
    t: float
    params: RieszParams
    dt: float
    step_count: int = 0
    history: tuple = ()


# -- initial data ------------------------------------------------------------------------------

def _spectral_density(coef, n, d):
    """Field with given series coefficients, shifted and scaled to unit mass."""
    vals = np.fft.irfftn(coef * origin_phase(n, d), s=(n,) * d, axes=tuple(range(-d, 0)), norm="forward")
    return vals


def initial_profile(spec, n, d):
    """Named initial densities.

    ``spec`` is a dict with ``name`` and profile arguments:

    - ``single_mode``: ``eps``, ``k`` -> ``1 + eps cos(2 pi k x_1)``
    - ``random_band``: ``seed``, ``kmax``, ``eps`` -> ``1 + eps * phi`` with
      ``phi`` a random band-limited field scaled to ``max |phi| = 1``
    - ``bump``: ``center``, ``width``, ``weight`` (default 1) -> mixture of
      the uniform density and a periodised Gaussian
    - ``plateau``: ``center``, ``width``, ``edge``, ``amp`` -> uniform plus a
      smoothed box of half-width ``width``, renormalised

    Densities are constructed in Fourier space, so the mass is exactly 1.
    """
    spec = dict(spec)
    name = spec.pop("name")
    x = grid_points(n, d)
    if name == "single_mode":
        eps, k = float(spec.get("eps", 0.3)), spec.get("k", 1)
        kv = np.zeros(d)
        kv[: np.size(k)] = k
        vals = 1.0 + eps * np.cos(2 * np.pi * (x @ kv))
    elif name == "random_band":
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        kmax, eps = int(spec.get("kmax", 4)), float(spec.get("eps", 0.3))
        band = np.ones((n,) * (d - 1) + (n // 2 + 1,), dtype=bool)
        for k in wavenumbers(n, d):
            band &= np.abs(k) <= kmax
        band.flat[0] = False
        coef = np.zeros(band.shape, dtype=complex)
        coef[band] = rng.standard_normal(band.sum()) + 1j * rng.standard_normal(band.sum())
        phi = _spectral_density(coef, n, d)
        vals = 1.0 + eps * phi / np.abs(phi).max()
    elif name == "bump":
        width = float(spec.get("width", 0.05))
        weight = float(spec.get("weight", 1.0))
        center = np.broadcast_to(np.asarray(spec.get("center", 0.0), dtype=float), (d,))
        ks = wavenumbers(n, d)
        coef = np.exp(-2 * np.pi**2 * width**2 * sum(k * k for k in ks))
        coef = coef * np.exp(-2j * np.pi * sum(k * c for k, c in zip(ks, center)))
        vals = (1.0 - weight) + weight * _spectral_density(coef, n, d)
    elif name == "plateau":
        width = float(spec.get("width", 0.25))
        edge = float(spec.get("edge", 0.02))
        amp = float(spec.get("amp", 0.5))
        center = np.broadcast_to(np.asarray(spec.get("center", 0.0), dtype=float), (d,))
        coef = np.ones(())
        for k, c in zip(wavenumbers(n, d), center):
            with np.errstate(invalid="ignore", divide="ignore"):
                box = np.where(k == 0, 2 * width, np.sin(2 * np.pi * k * width) / (np.pi * np.where(k == 0, 1, k)))
            coef = coef * box * np.exp(-2 * np.pi**2 * edge**2 * k * k) * np.exp(-2j * np.pi * k * c)
        h = _spectral_density(coef, n, d)
        vals = 1.0 + amp * (h - h.mean())
    else:
        raise ParameterError(f"unknown initial profile {name!r}")
    # Gaussian tails can dip below zero by round-off
    vals = np.where(np.abs(vals) < 1e-12 * np.abs(vals).max(), np.maximum(vals, 0.0), vals)
    vals = vals / vals.mean()
    if vals.min() < 0:
        raise ParameterError(f"initial profile {name!r} is not a nonnegative density")
    return GridField(vals, d, name="mu", probability=True)


# -- operators ---------------------------------------------------------------------------------

def velocity_field(mu, params, table=None, include_log=False):
    """Drift ``M grad(g * mu)`` computed spectrally.

    With ``include_log`` the diagnostic field ``sigma grad log mu + grad(g * mu)``
    is returned instead (no flow matrix). ``table`` is accepted for API
    symmetry with the particle code and is not needed here.
    """
    ops = _ops(params, mu.n)
    if not include_log:
        return GridField(ops.drift(mu.spectrum), mu.d, name="velocity")
    if mu.values.min() <= 0:
        raise DomainError("grad log mu needs a strictly positive density")
    gg = ops.grad_g_conv(mu.spectrum)
    dmu = np.stack([ops.irfft(ik * mu.spectrum) for ik in ops.ik])
    return GridField(params.sigma * dmu / mu.values + gg, mu.d, name="u")


def _phi1(z):
    out = np.ones_like(z)
    nz = z != 0
    out[nz] = np.expm1(z[nz]) / z[nz]
    return out


def _nonlinear(ops, mu_spec):
    """``-div(mu V)`` in Fourier space, dealiased, and ``max |V|``."""
    V = ops.drift(mu_spec)
    mu_lo = ops.irfft(mu_spec * ops.mask)
    flux = ops.rfft(mu_lo * V) * ops.mask
    N = -sum(ik * flux[a] for a, ik in enumerate(ops.ik))
    vmax = float(np.sqrt(np.max(np.sum(V * V, axis=0))))
    return N, vmax


def step(state, dt=None, interaction=True, c_cfl=0.5, neg_tol=None):
    """One ETD1 step of size ``min(dt, c_cfl * h / max|V|)``.

    Raises
    ------
    BlowUpError
        On non-finite values, or (gradient flow) on negativity beyond
        ``neg_tol`` (default ``1e-6 * max mu``).
    """
    params = state.params
    mu = state.mu
    ops = _ops(params, mu.n)
    dt = state.dt if dt is None else dt
    spec = mu.spectrum
    if interaction:
        N, vmax = _nonlinear(ops, spec)
        if vmax > 0:
            dt = min(dt, c_cfl * mu.h / vmax)
    else:
        N, vmax = 0.0, 0.0
    z = ops.L * dt
    new = np.exp(z) * spec + dt * _phi1(z) * N
    new.flat[0] = spec.flat[0]
    vals = ops.irfft(new)
    t = state.t + dt
    if not np.all(np.isfinite(vals)):
        raise BlowUpError(f"non-finite density at t={t:.6g}", t)
    if params.is_gradient:
        tol = 1e-6 * float(mu.values.max()) if neg_tol is None else neg_tol
        if vals.min() < -tol:
            raise BlowUpError(f"density became negative ({vals.min():.3e}) at t={t:.6g}", t)
    nf = GridField(vals, mu.d, name=mu.name)
    nf.__dict__["spectrum"] = new
    return replace(state, mu=nf, t=t, step_count=state.step_count + 1)


# -- functionals -------------------------------------------------------------------------------

def _log_mu(mu, floor=None):
    v = mu.values
    if floor is None:
        if v.min() <= 0:
            raise DomainError("log mu needs a strictly positive density")
        return v
    return np.maximum(v, floor)


def entropy(mu, floor=None):
    """``int mu log mu`` as ``int ((1+u) log1p(u) - u)`` with ``u = mu - 1``.

    The two agree for unit mass; the second form keeps full relative accuracy
    when ``mu`` is close to uniform.
    """
    v = _log_mu(mu, floor)
    u = v - 1.0
    return float(np.mean(v * np.log1p(u) - u))


def energy(mu, params):
    """``(1/2) sum_{xi != 0} ghat(xi) |muhat(xi)|^2``."""
    ops = _ops(params, mu.n)
    return 0.5 * float(np.sum(ops.weights * ops.ghat * np.abs(mu.spectrum) ** 2))


def free_energy(mu, params, floor=None):
    return params.sigma * entropy(mu, floor) + energy(mu, params)


def dissipation(mu, params, floor=None):
    """``int |sigma grad log mu + grad(g * mu)|^2 mu``."""
    ops = _ops(params, mu.n)
    v = _log_mu(mu, floor)
    gg = ops.grad_g_conv(mu.spectrum)
    dmu = np.stack([ops.irfft(ik * mu.spectrum) for ik in ops.ik])
    u = params.sigma * dmu / v + gg
    return float(np.mean(np.sum(u * u, axis=0) * mu.values))


def record(mu, params, t):
    """Full :class:`DiagnosticsRecord` (``log`` floored at 1e-14)."""
    dev = mu - 1.0
    return DiagnosticsRecord(
        t=float(t), mass=mu.mass(), l1=lp_norm(dev, 1), l2=lp_norm(dev, 2), linf=lp_norm(dev, np.inf),
        free_energy=free_energy(mu, params, LOG_FLOOR), dissipation=dissipation(mu, params, LOG_FLOOR),
        entropy=entropy(mu, LOG_FLOOR), energy=energy(mu, params),
        min_mu=float(mu.values.min()), max_mu=float(mu.values.max()),
        sobolev_h1=sobolev_seminorm(mu, 1.0),
        grad_l2=derivative_norm(mu, 1, 2), grad_linf=derivative_norm(mu, 1, np.inf),
        hess_l2=derivative_norm(mu, 2, 2), hess_linf=derivative_norm(mu, 2, np.inf))


# -- driver ------------------------------------------------------------------------------------

@dataclass
class PdeConfig:
    """Run configuration (mirrors the ``[pde]`` TOML table)."""

    d: int = 1
    s: float = 0.0
    flow: str = "gradient"
    sigma: float = 0.25
    grid: int = 128
    dt: float = 1e-3
    t_end: float = 1.0
    record_every: float | None = None
    record_times: list | None = None
    snapshot_times: list = field(default_factory=list)
    initial: dict = field(default_factory=lambda: dict(name="single_mode", eps=0.3, k=1))
    interaction: bool = True
    c_cfl: float = 0.5

    def __post_init__(self):
        if self.dt <= 0 or self.t_end <= 0:
            raise ParameterError("dt and t_end must be positive")
        if self.grid < 4 or self.grid & (self.grid - 1):
            raise ParameterError("grid must be a power of two")

    @property
    def params(self):
        return RieszParams(self.d, self.s, self.flow, self.sigma)

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ParameterError(f"unknown pde config keys: {sorted(extra)}")
        return cls(**data)

    def to_dict(self):
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def times(self):
        """Record times (always including 0 and ``t_end``)."""
        if self.record_times is not None:
            ts = sorted({0.0, *map(float, self.record_times), float(self.t_end)})
        elif self.record_every is not None:
            m = int(round(self.t_end / self.record_every))
            ts = [k * self.record_every for k in range(m + 1)]
            if ts[-1] < self.t_end * (1 - 1e-12):
                ts.append(self.t_end)
        else:
            m = int(math.ceil(self.t_end / self.dt - 1e-9))
            ts = [min(k * self.dt, self.t_end) for k in range(m + 1)]
        return np.asarray(ts, dtype=float)


@dataclass
class PdeRun:
    config: PdeConfig
    records: list
    snapshots: dict
    final: PdeState

    def series(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def times(self):
        return self.series("t")


def run(config, mu0=None, on_record=None):
    """Integrate to ``t_end``, landing exactly on every record time."""
    params = config.params
    mu = initial_profile(config.initial, config.grid, config.d) if mu0 is None else mu0
    state = PdeState(mu, 0.0, params, config.dt)
    rec_times = config.times()
    snap_times = sorted(float(t) for t in config.snapshot_times)
    stops = np.unique(np.concatenate([rec_times, snap_times])) if snap_times else rec_times
    records, snaps = [], {}
    for target in stops:
        while state.t < target - 1e-12 * max(1.0, target):
            h = min(config.dt, target - state.t)
            state = step(state, h, interaction=config.interaction, c_cfl=config.c_cfl)
            if target - state.t < 1e-12 * max(1.0, target):
                state = replace(state, t=float(target))
        if np.any(np.isclose(rec_times, target, rtol=0, atol=1e-12)):
            r = record(state.mu, params, target)
            records.append(r)
            if on_record is not None:
                on_record(r, state)
        if any(abs(target - s) < 1e-12 for s in snap_times):
            snaps[float(target)] = state.mu
    return PdeRun(config, records, snaps, replace(state, history=tuple(records)))


def fit_exp_rate(series, window=None):
    """Decay rate ``-slope`` of ``log(value)`` against ``t`` by least squares.

    Parameters
    ----------
    series : sequence of (t, value) pairs, or a (2, m) array
    window : (t0, t1), optional

    Returns
    -------
    rate, stderr : float
    """
    t, y = _as_tv(series)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, y = t[keep], y[keep]
    if t.size < 2:
        raise FitError("need at least two points inside the fit window")
    if np.any(y <= 0):
        raise FitError("nonpositive values inside the fit window")
    slope, stderr = _linfit(t, np.log(y))
    return -slope, stderr


def _as_tv(series):
    arr = np.asarray(series, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 2 and arr.shape[0] != 2:
        arr = arr.T
    if arr.ndim != 2 or arr.shape[0] != 2:
        raise FitError("series must be (t, value) pairs")
    return arr[0], arr[1]


def _linfit(x, y):
    """Least-squares slope and its standard error."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xm = x - x.mean()
    sxx = float(xm @ xm)
    if sxx == 0:
        raise FitError("degenerate abscissae")
    slope = float(xm @ (y - y.mean())) / sxx
    if x.size > 2:
        resid = y - y.mean() - slope * xm
        stderr = math.sqrt(float(resid @ resid) / (x.size - 2) / sxx)
    else:
        stderr = float("nan")
    return slope, stderr


def derivative_decay_report(run_output, n=1, q=np.inf, early=(1e-3, 1e-1), late=None):
    """Early-time smoothing and late-time decay of ``grad^n mu``.

    Returns a dict with the sup over ``sigma t`` in ``early`` of
    ``(sigma t)^{n/2} ||grad^n mu||_{L^q}``, the per-record values, and the
    fitted exponential rate over ``late`` (default: second half of the run).
    """
    if n not in (1, 2) or q not in (2, np.inf):
        raise ParameterError("n must be 1 or 2 and q must be 2 or inf")
    col = f"{'grad' if n == 1 else 'hess'}_{'l2' if q == 2 else 'linf'}"
    sigma = run_output.config.sigma
    t = run_output.times
    vals = run_output.series(col)
    tau = sigma * t
    win = (tau >= early[0] * (1 - 1e-9)) & (tau <= early[1] * (1 + 1e-9))
    scaled = tau[win] ** (n / 2) * vals[win]
    if late is None:
        late = (0.5 * t[-1], t[-1])
    rate, stderr = fit_exp_rate(np.stack([t, vals]), late)
    return dict(column=col, sigma_t=tau[win], scaled=scaled, early_sup=float(scaled.max()) if scaled.size else
                float("nan"), late_rate=rate, late_stderr=stderr)
