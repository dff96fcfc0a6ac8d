"""Periodic grid fields on the unit torus and their spectral toolkit.

Conventions
-----------
The torus is ``[-1/2, 1/2)^d`` sampled at ``x_j = -1/2 + j/n``. Fourier
coefficients follow the series convention

    f(x) = sum_xi fhat(xi) exp(2 pi i xi . x),

so ``fhat = fftn(f) / n**d`` up to the phase of the grid origin. Every
operation here is a Fourier multiplier that depends on ``|xi|`` only, and the
origin phase cancels; it is reapplied only by :func:`trig_eval`, which evaluates
the series at off-grid points. Real fields are transformed with ``rfftn``
(Hermitian half-spectrum storage).
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ParameterError

__all__ = [
    "GridField",
    "grid_points",
    "wavenumbers",
    "full_wavenumbers",
    "dealias_mask",
    "origin_phase",
    "series_coefficients",
    "centered_coefficients",
    "heat_semigroup",
    "lp_norm",
    "sobolev_seminorm",
    "gradient",
    "derivative_norm",
    "hypercontractivity_ratio",
    "heat_kernel_sup_deviation",
    "trig_eval",
    "save_snapshot",
    "load_snapshot",
    "radial_profile",
    "write_radial_profile_csv",
]


def _check_n(n):
    if n < 2 or n & (n - 1):
        raise ParameterError(f"grid size must be a power of two >= 2, got {n}")


def grid_points(n, d):
    """Coordinates of the uniform grid, shape ``(n,)*d + (d,)``."""
    x = -0.5 + np.arange(n) / n
    mesh = np.meshgrid(*([x] * d), indexing="ij")
    return np.stack(mesh, axis=-1)


def wavenumbers(n, d):
    """Integer wavenumbers broadcastable against an ``rfftn`` spectrum."""
    ks = []
    for axis in range(d):
        k = np.fft.rfftfreq(n, 1.0 / n) if axis == d - 1 else np.fft.fftfreq(n, 1.0 / n)
        shape = [1] * d
        shape[axis] = k.size
        ks.append(k.reshape(shape))
    return ks


def full_wavenumbers(n, d):
    """Integer wavenumbers broadcastable against an ``fftn`` spectrum."""
    ks = []
    for axis in range(d):
        k = np.fft.fftfreq(n, 1.0 / n)
        shape = [1] * d
        shape[axis] = n
        ks.append(k.reshape(shape))
    return ks


def _k2(n, d):
    ks = wavenumbers(n, d)
    return sum(k * k for k in ks)


def _hermitian_weights(n, d):
    """Multiplicity of each rfft mode in the full spectrum (for Parseval sums)."""
    m = n // 2 + 1
    w = np.full(m, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    shape = [1] * d
    shape[-1] = m
    return w.reshape(shape)


def dealias_mask(n, d):
    """Boolean rfft-layout mask of modes kept by the 2/3 rule."""
    cut = n / 3.0
    mask = np.ones((n,) * (d - 1) + (n // 2 + 1,), dtype=bool)
    for k in wavenumbers(n, d):
        mask &= np.abs(k) <= cut
    return mask


def origin_phase(n, d):
    """rfft-layout factor ``(-1)^(xi_1 + ... + xi_d)`` from the grid origin at ``-1/2``."""
    out = np.ones((n,) * (d - 1) + (n // 2 + 1,))
    for k in wavenumbers(n, d):
        out = out * np.where(k.astype(np.int64) % 2 == 0, 1.0, -1.0)
    return out


def series_coefficients(field):
    """Fourier-series coefficients ``fhat(xi)`` (rfft layout) of a sampled field."""
    return field.spectrum * origin_phase(field.n, field.d)


def centered_coefficients(field, K=None):
    """True series coefficients on the cube ``|xi|_inf <= K`` (index ``xi + K``).

    Leading component axes of vector fields are kept. A retained Nyquist
    mode is split evenly between ``+n/2`` and ``-n/2``.
    """
    n, d = field.n, field.d
    K = n // 2 if K is None else min(int(K), n // 2)
    return _full_centered(field.spectrum * origin_phase(n, d), n, d, K)


@dataclass(frozen=True, eq=False)
class GridField:
    """Real scalar (``values.shape == (n,)*d``) or vector field
    (``values.shape == (d,) + (n,)*d``) on the uniform periodic grid.

    The spectral representation is computed lazily and cached; fields are
    never mutated after construction.
    """

    values: np.ndarray
    d: int
    name: str = ""
    probability: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        shape = v.shape
        if v.ndim == self.d:
            n = shape[0]
        elif v.ndim == self.d + 1 and shape[0] == self.d:
            n = shape[1]
        else:
            raise ParameterError(f"values of shape {shape} do not describe a field in d={self.d}")
        if any(k != n for k in shape[-self.d:]):
            raise ParameterError("grid must have the same number of points per axis")
        _check_n(n)
        if self.probability and self.is_scalar:
            if v.min() < -1e-12 or abs(v.mean() - 1.0) > 1e-12:
                raise ParameterError("probability field must be nonnegative with unit mass")

    @property
    def n(self):
        return self.values.shape[-1]

    @property
    def is_scalar(self):
        return self.values.ndim == self.d

    @property
    def h(self):
        return 1.0 / self.n

    @cached_property
    def spectrum(self):
        """rfftn coefficients normalised as Fourier-series coefficients."""
        axes = tuple(range(-self.d, 0))
        return np.fft.rfftn(self.values, axes=axes, norm="forward")

    @classmethod
    def from_spectrum(cls, spec, d, n, **kw):
        axes = tuple(range(-d, 0))
        values = np.fft.irfftn(spec, s=(n,) * d, axes=axes, norm="forward")
        obj = cls(values, d, **kw)
        obj.__dict__["spectrum"] = spec
        return obj

    @classmethod
    def from_function(cls, func, n, d, **kw):
        """Sample ``func(x)`` where ``x`` has shape ``(..., d)``."""
        return cls(func(grid_points(n, d)), d, **kw)

    @classmethod
    def constant(cls, c, n, d, **kw):
        return cls(np.full((n,) * d, float(c)), d, **kw)

    def with_values(self, values, **kw):
        params = dict(d=self.d, name=self.name, probability=False, meta=dict(self.meta))
        params.update(kw)
        return GridField(values, **params)

    def mean(self):
        """Grid average; one entry per component for vector fields."""
        m = self.values.mean(axis=tuple(range(-self.d, 0)))
        return float(m) if self.is_scalar else m

    def mass(self):
        """Quadrature mass (the torus has unit volume)."""
        return float(self.values.mean())

    def parseval_l2sq(self):
        """``sum |fhat|^2`` over the full lattice, computed on the half spectrum."""
        w = _hermitian_weights(self.n, self.d)
        return float(np.sum(w * np.abs(self.spectrum) ** 2))

    def __sub__(self, other):
        if isinstance(other, GridField):
            other = other.values
        return self.with_values(self.values - other)

    def __add__(self, other):
        if isinstance(other, GridField):
            other = other.values
        return self.with_values(self.values + other)


def heat_semigroup(field, t, sigma):
    """Apply ``exp(sigma t Laplacian)``: multiplier ``exp(-4 pi^2 sigma t |xi|^2)``."""
    if t < 0 or sigma < 0:
        raise ParameterError("heat semigroup needs t >= 0 and sigma >= 0")
    if t == 0 or sigma == 0:
        return field
    mult = np.exp(-4.0 * np.pi**2 * sigma * t * _k2(field.n, field.d))
    mult.flat[0] = 1.0
    return GridField.from_spectrum(field.spectrum * mult, field.d, field.n, name=field.name, meta=dict(field.meta))


def lp_norm(field, p):
    """Quadrature ``L^p`` norm; ``p = inf`` is the max over grid samples.

    For vector fields the pointwise Euclidean norm is used.
    """
    if p < 1:
        raise ParameterError(f"L^p norm needs p >= 1, got {p}")
    v = field.values
    a = np.abs(v) if field.is_scalar else np.sqrt(np.sum(v * v, axis=0))
    if np.isinf(p):
        return float(a.max())
    if p == 1:
        return float(a.mean())
    if p == 2:
        return float(np.sqrt(np.mean(a * a)))
    return float(np.mean(a**p) ** (1.0 / p))


def sobolev_seminorm(field, alpha):
    """Homogeneous ``H^alpha`` seminorm by Parseval, mean mode excluded."""
    k2 = _k2(field.n, field.d)
    with np.errstate(divide="ignore"):
        mult = (4.0 * np.pi**2 * k2) ** alpha
    mult.flat[0] = 0.0
    w = _hermitian_weights(field.n, field.d)
    return float(np.sqrt(np.sum(w * mult * np.abs(field.spectrum) ** 2)))


def gradient(field):
    """Spectral gradient of a scalar field (vector field, first axis = component)."""
    n, d, spec = field.n, field.d, field.spectrum
    comps = [np.fft.irfftn(2j * np.pi * k * spec, s=(n,) * d, axes=tuple(range(-d, 0)), norm="forward")
             for k in _nyquist_free(n, d)]
    return GridField(np.stack(comps), field.d, name=f"grad {field.name}".strip())


def _nyquist_free(n, d):
    """Wavenumbers for odd-order derivatives: the Nyquist mode is zeroed."""
    out = []
    for k in wavenumbers(n, d):
        k = k.copy()
        k[np.abs(k) == n // 2] = 0.0
        out.append(k)
    return out


def derivative_norm(field, order, q):
    """``L^q`` norm of the full derivative tensor of order 1 or 2 (Frobenius pointwise)."""
    if order not in (1, 2):
        raise ParameterError("derivative order must be 1 or 2")
    n, d, spec = field.n, field.d, field.spectrum
    shape = (n,) * d
    axes = tuple(range(-d, 0))
    if order == 1:
        comps = [np.fft.irfftn(2j * np.pi * k * spec, s=shape, axes=axes, norm="forward") for k in _nyquist_free(n, d)]
    else:
        ks = wavenumbers(n, d)
        comps = [np.fft.irfftn(-4.0 * np.pi**2 * ka * kb * spec, s=shape, axes=axes, norm="forward")
                 for a, ka in enumerate(ks) for b, kb in enumerate(ks)]
    mag = np.sqrt(sum(c * c for c in comps))
    if np.isinf(q):
        return float(mag.max())
    return float(np.mean(mag**q) ** (1.0 / q))


def hypercontractivity_ratio(field, t, sigma, p, q):
    """``|| e^{sigma t Lap} f ||_q * min(sigma t, 1)^{(d/2)(1/p - 1/q)} / || f ||_p``.

    ``field`` should have zero mean; the returned number is the empirical
    constant in the L^p -> L^q smoothing estimate of the heat semigroup.
    """
    if q < p:
        raise ParameterError("need q >= p")
    tau = sigma * t
    expo = 0.5 * field.d * ((1.0 / p) - (0.0 if np.isinf(q) else 1.0 / q))
    num = lp_norm(heat_semigroup(field, t, sigma), q)
    return num * min(tau, 1.0) ** expo / lp_norm(field, p)


def heat_kernel_sup_deviation(t, d, kmax=None):
    """``sum_{xi != 0} exp(-4 pi^2 t |xi|^2)``, the upper bound for ``||K_t - 1||_inf``."""
    if kmax is None:
        kmax = int(np.ceil(np.sqrt(40.0 / (4 * np.pi**2 * t)))) + 1
    k = np.arange(-kmax, kmax + 1)
    one = np.exp(-4 * np.pi**2 * t * k * k).sum()
    return float(one**d - 1.0)


def trig_eval(spectrum, n, d, points, kmax=None):
    """Evaluate the trigonometric interpolant at arbitrary torus points.

    Parameters
    ----------
    spectrum : ndarray
        rfftn-layout coefficients of a field sampled on the standard grid,
        optionally with leading component axes (e.g. shape ``(d,) + rshape``).
    points : ndarray, shape (N, d)
    kmax : int, optional
        Keep only modes with ``|xi|_inf <= kmax``; defaults to the Nyquist.

    Returns
    -------
    ndarray
        Shape ``lead + (N,)``; real part of the exact series sum.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    K = n // 2 if kmax is None else min(int(kmax), n // 2)
    lead = spectrum.shape[:-d]
    coeffs = _full_centered(spectrum, n, d, K)  # lead + (2K+1,)*d, index k+K
    ks = np.arange(-K, K + 1)
    # grid origin is at -1/2: series in (x + 1/2)
    phases = [np.exp(2j * np.pi * np.outer(points[:, a] + 0.5, ks)) for a in range(d)]
    c = coeffs.reshape((-1,) + (2 * K + 1,) * d)
    out = np.empty((c.shape[0], points.shape[0]))
    for m in range(c.shape[0]):
        if d == 1:
            val = phases[0] @ c[m]
        elif d == 2:
            val = np.sum((phases[0] @ c[m]) * phases[1], axis=1)
        else:
            val = np.einsum("ia,ib,ic,abc->i", phases[0], phases[1], phases[2], c[m], optimize=True)
        out[m] = val.real
    return out.reshape(lead + (points.shape[0],))


def _full_centered(spectrum, n, d, K):
    """Expand a half spectrum to the centred cube ``|xi|_inf <= K``.

    A retained Nyquist mode is split evenly between ``+n/2`` and ``-n/2`` so
    that the interpolant stays real.
    """
    lead = spectrum.shape[:-d]
    axes = tuple(range(len(lead), len(lead) + d))
    full = np.fft.irfftn(spectrum, s=(n,) * d, axes=axes, norm="forward")
    full = np.fft.fftn(full, axes=axes, norm="forward")
    idx = np.arange(-K, K + 1) % n
    out = full
    for ax in axes:
        out = np.take(out, idx, axis=ax)
    if K == n // 2 and n % 2 == 0:
        for ax in axes:
            sl_lo = [slice(None)] * out.ndim
            sl_hi = [slice(None)] * out.ndim
            sl_lo[ax] = 0
            sl_hi[ax] = -1
            out[tuple(sl_lo)] *= 0.5
            out[tuple(sl_hi)] *= 0.5
    return out


# -- serialisation ---------------------------------------------------------------------------

_SNAP_MAGIC = b"RZLF"


def save_snapshot(field, path, time=0.0):
    """Flat little-endian float64 payload preceded by a length-prefixed JSON header."""
    header = dict(d=field.d, n_per_dim=field.n, time=float(time), name=field.name,
                  shape=list(field.values.shape), dtype="<f8")
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(len(hb).to_bytes(8, "little"))
        fh.write(hb)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_snapshot(path):
    """Inverse of :func:`save_snapshot`; returns ``(field, header)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != _SNAP_MAGIC:
            raise ParameterError(f"{path} is not a field snapshot")
        hl = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hl))
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(header["shape"])
    return GridField(data.copy(), header["d"], name=header["name"]), header


def radial_profile(field, bins=None):
    """Average of a scalar field over shells of ``|x|`` (minimum image)."""
    x = grid_points(field.n, field.d)
    r = np.sqrt(np.sum(x * x, axis=-1)).ravel()
    if bins is None:
        bins = field.n // 2
    edges = np.linspace(0.0, r.max() + 1e-12, bins + 1)
    which = np.digitize(r, edges) - 1
    vals = field.values.ravel()
    sums = np.bincount(which, weights=vals, minlength=bins)[:bins]
    counts = np.bincount(which, minlength=bins)[:bins]
    centers = 0.5 * (edges[1:] + edges[:-1])
    keep = counts > 0
    return centers[keep], sums[keep] / counts[keep]


def write_radial_profile_csv(field, path, bins=None):
    r, v = radial_profile(field, bins)
    buf = io.StringIO()
    buf.write("r,value\n")
    for a, b in zip(r, v):
        buf.write(f"{a:.17g},{b:.17g}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())
