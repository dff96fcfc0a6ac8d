"""The zero-mean periodic Riesz potential on the unit torus.

``g`` is defined spectrally by ``ghat(xi) = c_{d,s} (2 pi |xi|)^{s-d}`` for
``xi != 0`` and ``ghat(0) = 0``. Near the origin it behaves like the
Euclidean kernel ``g_E(x) = |x|^{-s}`` (``-log|x|`` when ``s = 0``); the
difference ``g - g_E`` is smooth.

Evaluation uses an Ewald split with a Gaussian screen of width
``1/sqrt(alpha)``:

    g(x) = sgn * [ g_E(x) + R(|x|) + F(x) - N0 ]

where ``g_E + R`` is the screened Euclidean kernel (short ranged, closed form
through incomplete gamma functions), ``F`` is a rapidly convergent Fourier
series and ``N0`` is the integral of the screened kernel. ``R`` and ``F``
are tabulated once per :class:`PotentialTable`; evaluation is interpolation
plus the analytic ``g_E``.

For ``s < 0`` the closed-form constant ``c_{d,s}`` is negative; we use its
absolute value so that ``ghat >= 0`` (repulsive, positive-definite
interaction), which makes ``g`` behave like ``-|x|^{-s}`` near the origin
(``sgn = -1``).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special

from . import kernels
from .errors import ParameterError, ResolutionError, SingularityError
from .grid import GridField, _hermitian_weights, origin_phase, wavenumbers

__all__ = [
    "RieszParams",
    "PotentialTable",
    "riesz_constant",
    "riesz_fourier_coeff",
    "fourier_multiplier",
    "build_table",
    "eval_g",
    "eval_grad_g",
    "truncated_g",
    "truncation_constant",
    "fractional_laplacian",
    "synthesize_g",
    "euclidean_g",
]

S_ZERO_TOL = 1e-12
# alpha * cutoff**2: the screened kernel is below 1e-15 of g_E at the cutoff
SPLIT_DECAY = 36.0
TABLE_FORMAT = 1
_TABLE_MAGIC = b"RZLT"


def _normalize_s(s):
    s = float(s)
    if s != 0.0 and abs(s) < S_ZERO_TOL:
        warnings.warn(f"s = {s!r} is treated as the logarithmic case s = 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return s


def _check_ds(d, s):
    if int(d) != d or d < 1:
        raise ParameterError(f"dimension must be a positive integer, got {d}")
    if not (d - 2 <= s < d):
        raise ParameterError(f"exponent s={s} outside [d-2, d) for d={d}")


def riesz_constant(d, s):
    """Normalisation ``c_{d,s}`` with ``|nabla|^{d-s} g = c_{d,s} (delta_0 - 1)``.

    Parameters
    ----------
    d : int
    s : float
        ``d - 2 <= s < d``; ``|s| < 1e-12`` is treated as 0.

    Returns
    -------
    float
        ``4^{(d-s)/2} Gamma((d-s)/2) pi^{d/2} / |Gamma(s/2)|`` for ``s != 0``
        and ``Gamma(d/2) (4 pi)^{d/2} / 2`` for ``s = 0``.
    """
    s = _normalize_s(s)
    _check_ds(d, s)
    if s == 0.0:
        return math.gamma(d / 2) * (4 * math.pi) ** (d / 2) / 2
    return 4 ** ((d - s) / 2) * math.gamma((d - s) / 2) * math.pi ** (d / 2) / abs(math.gamma(s / 2))


@dataclass(frozen=True, eq=False)
class RieszParams:
    """Problem definition: dimension, exponent, flow matrix and temperature.

    ``flow`` may be given as ``"gradient"`` (``M = -I``), ``"conservative"``
    (the standard rotation generator, zero in d = 1) or an explicit matrix.
    """

    d: int
    s: float
    flow: object = "gradient"
    sigma: float = 0.25

    def __post_init__(self):
        s = _normalize_s(self.s)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "d", int(self.d))
        _check_ds(self.d, s)
        if self.d > 3:
            raise ParameterError("only d <= 3 is supported")
        if self.sigma < 0 or not np.isfinite(self.sigma):
            raise ParameterError(f"temperature must be finite and >= 0, got {self.sigma}")
        M = self._flow_matrix(self.flow, self.d)
        M.setflags(write=False)
        object.__setattr__(self, "flow", M)

    @staticmethod
    def _flow_matrix(flow, d):
        if isinstance(flow, str):
            if flow == "gradient":
                return -np.eye(d)
            if flow == "conservative":
                M = np.zeros((d, d))
                if d >= 2:
                    M[0, 1], M[1, 0] = 1.0, -1.0
                return M
            raise ParameterError(f"unknown flow {flow!r}")
        M = np.array(flow, dtype=float).reshape(d, d)
        if np.array_equal(M, -np.eye(d)) or np.array_equal(M + M.T, np.zeros((d, d))):
            return M
        raise ParameterError("flow must be -Identity or antisymmetric")

    @property
    def c_ds(self):
        return riesz_constant(self.d, self.s)

    @property
    def is_gradient(self):
        return bool(np.array_equal(self.flow, -np.eye(self.d)))

    @property
    def flow_name(self):
        return "gradient" if self.is_gradient else "conservative"

    @property
    def sign(self):
        """Sign of the singular part: ``g ~ sign * |x|^{-s}``."""
        return -1.0 if self.s < 0 else 1.0

    def replace(self, **kw):
        args = dict(d=self.d, s=self.s, flow=self.flow, sigma=self.sigma)
        args.update(kw)
        return RieszParams(**args)

    def to_dict(self):
        return dict(d=self.d, s=self.s, flow=self.flow.tolist(), sigma=self.sigma)


def riesz_fourier_coeff(xi, params):
    """``ghat(xi) = c_{d,s} (2 pi |xi|)^{s-d}`` with ``ghat(0) = 0``.

    ``xi`` is an integer vector of length ``d`` (or an array of them, last
    axis = component); in d = 1 a plain integer is accepted.
    """
    xi = np.asarray(xi, dtype=float)
    if params.d == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
        xi = xi[..., None]
    k = np.sqrt(np.sum(xi * xi, axis=-1))
    return _ghat_of_k(k, params)


def _ghat_of_k(k, params):
    k = np.asarray(k, dtype=float)
    out = np.zeros_like(k)
    nz = k > 0
    out[nz] = params.c_ds * (2 * np.pi * k[nz]) ** (params.s - params.d)
    return out if out.ndim else float(out)


def fourier_multiplier(params, n):
    """``ghat`` on the rfft layout of an ``n``-point grid."""
    ks = wavenumbers(n, params.d)
    return _ghat_of_k(np.sqrt(sum(k * k for k in ks)), params)


def euclidean_g(r, params):
    """``g_E(r)`` including the sign convention (``-log r`` at ``s = 0``)."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        if params.s == 0.0:
            return -np.log(r)
        return params.sign * r ** (-params.s)


# -- screened split ----------------------------------------------------------------------------

def _unit_sphere_area(d):
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def _Fb(b, z):
    """``z^{-b} P(b, z)`` continued to ``b <= 0`` by the downward recurrence."""
    z = np.asarray(z, dtype=float)
    if b > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(z > 0, special.gammainc(b, z) * z ** (-b), 1.0 / special.gamma(b + 1))
        return out
    return z * _Fb(b + 1, z) + np.exp(-z) / special.gamma(b + 1)


def _ein(z):
    """Entire exponential integral ``Ein(z) = int_0^z (1 - e^{-t}) / t dt``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z < 0.5
    zs = z[small]
    acc = np.zeros_like(zs)
    term = np.ones_like(zs)
    for k in range(1, 30):
        term = term * (-zs) / k
        acc -= term / k
    out[small] = acc
    zl = z[~small]
    out[~small] = special.exp1(zl) + np.euler_gamma + np.log(zl)
    return out


def _screen_parts(r, d, s, alpha):
    """``R(r)`` and ``R'(r)/r`` for the unit-sign kernel."""
    r = np.asarray(r, dtype=float)
    z = alpha * r * r
    if s == 0.0:
        R = 0.5 * (_ein(z) - np.euler_gamma - np.log(alpha))
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.where(z > 0, -np.expm1(-z) / np.where(z > 0, z, 1.0), 1.0) * alpha
        return R, q
    b = s / 2
    R = -(alpha**b) * _Fb(b, z)
    q = 2 * b * alpha ** (b + 1) * _Fb(b + 1, z)
    return R, q


def _screen_mean(d, s, alpha):
    """Integral over R^d of the screened kernel ``g_E + R``."""
    a = (d - s) / 2
    if s == 0.0:
        return math.pi ** (d / 2) * alpha ** (-d / 2) / d
    return math.pi ** (d / 2) * alpha ** (-a) / (a * math.gamma(s / 2))


def _far_coeff(k, d, s, alpha):
    """Fourier coefficients of the far field for the unit-sign kernel."""
    c_lit = riesz_constant(d, s) * (1.0 if s >= 0 else -1.0)
    k = np.asarray(k, dtype=float)
    out = np.zeros_like(k)
    nz = k > 0
    a = (d - s) / 2
    out[nz] = c_lit * (2 * np.pi * k[nz]) ** (s - d) * special.gammaincc(a, np.pi**2 * k[nz] ** 2 / alpha)
    return out


def _default_intervals(d):
    return 4096 if d == 1 else 512


@dataclass(frozen=True, eq=False)
class PotentialTable:
    """Precomputed split of ``g`` for fast pointwise evaluation.

    Attributes
    ----------
    params : RieszParams
    cutoff : float
        Near-field radius; the screen decays like ``exp(-36 (r/cutoff)^2)``.
    grid_size : int
        Spectral grid on which the far field is stored and checked.
    fourier_tail : GridField
        Far-field remainder ``sgn * (F - N0)`` sampled on ``grid_size``.
    bump : dict
        Splitting profile parameters (Gaussian screen decay and ``alpha``).
    tab : ndarray
        Interpolation table of ``g - g_E`` and its gradient (layout in
        :mod:`rieszlab.kernels`) with node spacing ``h``.
    """

    params: RieszParams
    cutoff: float
    grid_size: int
    fourier_tail: GridField
    bump: dict
    tab: np.ndarray
    h: float
    ghost: int = 3
    meta: dict = field(default_factory=dict)

    @property
    def alpha(self):
        return self.bump["alpha"]

    @property
    def kernel_args(self):
        p = self.params
        return (self.tab, self.h, self.ghost, p.s, p.sign)

    # -- evaluation ----------------------------------------------------------------------------

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 0 or (x.ndim == 1 and (self.params.d > 1 or x.size == 1))
        if x.ndim == 0 or (self.params.d == 1 and x.ndim == 1):
            x = x.reshape(-1, 1)
        else:
            x = np.atleast_2d(x)
        if x.shape[-1] != self.params.d:
            raise ParameterError(f"points must have {self.params.d} coordinates")
        return x, single

    def evaluate(self, x, eps=0.0, singular=1):
        """Vectorised ``(g, grad g)`` with optional near-field blending ``eps``."""
        pts, single = self._points(x)
        g, grad = kernels.eval_points(pts, *self.kernel_args, float(eps), int(singular))
        if single:
            return float(g[0]), grad[0]
        return g, grad

    def smooth_part(self, x):
        """``g - g_E`` (defined everywhere, including the origin)."""
        return self.evaluate(x, singular=0)[0]

    def smooth_grad(self, x):
        return self.evaluate(x, singular=0)[1]

    def mean(self):
        """Spatial mean of the represented ``g``.

        The screened kernel is integrated over the fundamental cell by radial
        quadrature (it is negligible outside the inscribed ball) and compared
        with its closed-form integral; the far field has zero mean mode.
        """
        p = self.params
        a = self.alpha
        rmax = 0.5

        def integrand(r):
            R, _ = _screen_parts(np.array([r]), p.d, p.s, a)
            ge = -math.log(r) if p.s == 0 else r ** (-p.s)
            return (ge + float(R[0])) * r ** (p.d - 1)

        # split the range where the screened kernel still varies
        knots = [0.0, 0.25 / math.sqrt(a), 1.0 / math.sqrt(a), 4.0 / math.sqrt(a), 8.0 / math.sqrt(a), rmax]
        total = 0.0
        for lo, hi in zip(knots[:-1], knots[1:]):
            if hi > lo:
                val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-15, epsrel=1e-13)
                total += val
        total *= _unit_sphere_area(p.d)
        return p.sign * total + float(self.fourier_tail.spectrum.flat[0].real)

    # -- serialisation -------------------------------------------------------------------------

    @cached_property
    def checksum(self):
        h = hashlib.sha256()
        for arr in (self.tab, self.fourier_tail.values):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self):
        p = self.params
        header = dict(version=TABLE_FORMAT, d=p.d, s=p.s, flow=p.flow.tolist(), sigma=p.sigma,
                      grid=self.grid_size, cutoff=self.cutoff, bump=self.bump, h=self.h,
                      ghost=self.ghost, shape=list(self.tab.shape), checksum=self.checksum)
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(_TABLE_MAGIC)
        buf.write(len(hb).to_bytes(8, "little"))
        buf.write(hb)
        for arr in (self.tab, self.fourier_tail.values):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        if blob[:4] != _TABLE_MAGIC:
            raise ParameterError("not a potential table blob")
        hl = int.from_bytes(blob[4:12], "little")
        header = json.loads(blob[12:12 + hl])
        if header["version"] != TABLE_FORMAT:
            raise ParameterError(f"unsupported table format {header['version']}")
        data = np.frombuffer(blob[12 + hl:], dtype="<f8")
        nt = int(np.prod(header["shape"]))
        n, d = header["grid"], header["d"]
        tab = data[:nt].reshape(header["shape"]).copy()
        tail = data[nt:].reshape((n,) * d).copy()
        params = RieszParams(d, header["s"], header["flow"], header["sigma"])
        table = cls(params, header["cutoff"], n, GridField(tail, d, name="fourier_tail"), header["bump"],
                    tab, header["h"], header["ghost"])
        if table.checksum != header["checksum"]:
            raise ParameterError("potential table checksum mismatch")
        return table

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_table(params, grid_size=256, cutoff=0.125, intervals=None):
    """Tabulate the smooth part of ``g`` for ``params``.

    Parameters
    ----------
    params : RieszParams
        ``d`` must be 1 or 2.
    grid_size : int
        Power of two; the far-field remainder must be resolved on this grid
        (its spectral energy beyond ``|xi|_inf > grid_size/3`` is below 1e-10
        of the total).
    cutoff : float
        Near-field radius in ``(0, 1/4]``.
    intervals : int, optional
        Interpolation intervals on ``[0, 1/2]`` per axis (default 4096 in
        d = 1, 512 in d = 2).

    Raises
    ------
    ResolutionError
        If ``grid_size`` is too small for the requested cutoff.
    """
    d, s = params.d, params.s
    if d not in (1, 2):
        raise ParameterError("potential tables support d = 1 and d = 2")
    if grid_size < 2 or grid_size & (grid_size - 1):
        raise ParameterError(f"grid_size must be a power of two, got {grid_size}")
    if not (0.0 < cutoff <= 0.25):
        raise ParameterError(f"cutoff must lie in (0, 1/4], got {cutoff}")
    alpha = SPLIT_DECAY / cutoff**2
    sgn = params.sign
    N0 = _screen_mean(d, s, alpha)

    # remainder on the user grid, with the resolution check
    ks = wavenumbers(grid_size, d)
    kabs = np.sqrt(sum(k * k for k in ks))
    tail_spec = sgn * _far_coeff(kabs, d, s, alpha)
    energy = _hermitian_weights(grid_size, d) * tail_spec**2
    outer = np.zeros(kabs.shape, dtype=bool)
    for k in ks:
        outer |= np.abs(k) > grid_size / 3.0
    total = float(energy.sum())
    if total > 0 and float(energy[outer].sum()) >= 1e-10 * total:
        kneed = math.sqrt(40.0 * alpha) / math.pi
        raise ResolutionError(
            f"far field not resolved on grid {grid_size} with cutoff {cutoff}; "
            f"use grid_size >= {1 << math.ceil(math.log2(3 * kneed))} or a larger cutoff")
    tail_spec = tail_spec.copy()
    tail_spec.flat[0] = -sgn * N0
    # grid origin sits at -1/2: apply the shift phase so samples are F at grid points
    tail = GridField.from_spectrum(tail_spec * origin_phase(grid_size, d), d, grid_size, name="fourier_tail")

    ghost = 3
    T = intervals or _default_intervals(d)
    M = 2 * T
    if M < 2 * math.sqrt(45.0 * alpha) / math.pi:
        raise ResolutionError(f"{T} interpolation intervals cannot resolve cutoff {cutoff}")
    # far field on [0, 1) with the origin at index 0, read off around [0, 1/2]
    fks = wavenumbers(M, d)
    fspec = sgn * _far_coeff(np.sqrt(sum(k * k for k in fks)), d, s, alpha)
    fspec.flat[0] = -sgn * N0
    comps = [np.fft.irfftn(fspec, s=(M,) * d, axes=tuple(range(-d, 0)), norm="forward")]
    for k in fks:
        comps.append(np.fft.irfftn(2j * np.pi * k * fspec, s=(M,) * d, axes=tuple(range(-d, 0)), norm="forward"))
    nodes = np.arange(-ghost, T + ghost + 1)
    idx = nodes % M
    tab = np.stack([c[np.ix_(*([idx] * d))] for c in comps])
    # screened part, continued smoothly past the cell boundary
    u = np.meshgrid(*([nodes / M] * d), indexing="ij")
    R, q = _screen_parts(np.sqrt(sum(c * c for c in u)), d, s, alpha)
    tab[0] += sgn * R
    for a in range(d):
        tab[1 + a] += sgn * q * u[a]

    bump = dict(profile="gaussian", decay=SPLIT_DECAY, alpha=alpha)
    return PotentialTable(params, float(cutoff), int(grid_size), tail, bump, np.ascontiguousarray(tab), 1.0 / M,
                          ghost)


def eval_g(x, table):
    """``g(x)`` at one point or an ``(m, d)`` array of points.

    Raises
    ------
    SingularityError
        If any point coincides with the origin after wrapping.
    """
    g, _ = table.evaluate(x)
    if np.any(np.isnan(g)):
        raise SingularityError("g is singular at x = 0; regularize the evaluation")
    return g


def eval_grad_g(x, table):
    """``grad g(x)``; same conventions as :func:`eval_g`."""
    _, grad = table.evaluate(x)
    if np.any(np.isnan(grad)):
        raise SingularityError("grad g is singular at x = 0; regularize the evaluation")
    return grad


def truncation_constant(eta, params):
    """``C_eta = int (min(g_E(eta), g_E) - g_E)``, the mean shift of the capped kernel.

    The integrand vanishes outside the ball of radius ``eta < 1/4``, so the
    radial integral is exact on the torus.
    """
    d, s = params.d, params.s
    area = _unit_sphere_area(d)
    if s == 0.0:
        return -area * eta**d / d**2
    return -params.sign * area * eta ** (d - s) * s / (d * (d - s))


def truncated_g(x, eta, table):
    """Kernel with the Euclidean part capped at ``g_E(eta)``, shifted to zero mean.

    ``min(g_E(eta), g_E(x)) + (g - g_E)(x) - C_eta``; finite at the origin.
    """
    if not (0.0 < eta < 0.25):
        raise ParameterError(f"eta must lie in (0, 1/4), got {eta}")
    g, _ = table.evaluate(x, eps=eta, singular=2)
    return g - truncation_constant(eta, table.params)


def fractional_laplacian(field, alpha):
    """Multiply the spectrum by ``(2 pi |xi|)^alpha``; the mean mode is set to 0."""
    if alpha < 0:
        raise ParameterError("alpha must be >= 0")
    ks = wavenumbers(field.n, field.d)
    k = np.sqrt(sum(kk * kk for kk in ks))
    with np.errstate(divide="ignore"):
        mult = (2 * np.pi * k) ** alpha
    mult.flat[0] = 0.0
    return GridField.from_spectrum(field.spectrum * mult, field.d, field.n, name=field.name)


def synthesize_g(params, n):
    """Band-limited ``g`` on the ``n``-point grid: one coefficient per lattice class."""
    spec = fourier_multiplier(params, n) * origin_phase(n, params.d)
    return GridField.from_spectrum(spec, params.d, n, name="g")
