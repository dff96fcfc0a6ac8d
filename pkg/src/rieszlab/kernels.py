"""Hot loops: table interpolation and O(N^2) pair sums.

Every kernel exists twice, as a numba ``@njit`` loop (``*_nb``) and as a
vectorised numpy routine (``*_np``). The public names dispatch on
:data:`rieszlab._accel.USE_NUMBA`; both variants stay importable so the
benchmark and the tests can compare them.

Table layout
------------
The smooth part ``S = g - g_E`` is tabulated on ``[0, 1/2]^d`` with spacing
``h`` and ``ghost`` extra nodes per side: node ``k`` sits at
``(k - ghost) * h``. ``tab[0]`` holds ``S`` and ``tab[1 + a]`` holds
``dS/dx_a``. ``S`` is even in each coordinate, so displacements are folded
into the positive orthant and the gradient components pick up the sign of
``y_a``. Ghost nodes beyond ``1/2`` hold the smooth continuation of ``S``
(not its reflection), so the interpolant stays smooth up to the cell
boundary. Reads use 6-point Lagrange stencils.

Near-field conventions
----------------------
``g_E(r) = -log r`` when ``s == 0`` and ``sgn * r**-s`` otherwise. With
``eps > 0`` the singular part is blended out by ``1 - chi(r / eps)``, where
``chi`` equals 1 below ``1/16`` and 0 above ``1/8`` (quintic smoothstep).
"""
import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "eval_points",
    "pair_forces",
    "pair_energy",
    "pair_energy_truncated",
    "pair_transport",
    "NUMBA_KERNELS",
    "NUMPY_KERNELS",
]

CHI_INNER = 1.0 / 16.0
CHI_OUTER = 1.0 / 8.0


# -- scalar helpers (numba) --------------------------------------------------------------------

@njit
def _lag6(p, w):
    a0 = p + 2.0
    a1 = p + 1.0
    a3 = p - 1.0
    a4 = p - 2.0
    a5 = p - 3.0
    l01 = a0 * a1
    l45 = a4 * a5
    w[0] = -(a1 * p * a3 * l45) / 120.0
    w[1] = (a0 * p * a3 * l45) / 24.0
    w[2] = -(l01 * a3 * l45) / 12.0
    w[3] = (l01 * p * l45) / 12.0
    w[4] = -(l01 * p * a3 * a5) / 24.0
    w[5] = (l01 * p * a3 * a4) / 120.0


@njit
def _gE(r, s, sgn):
    if s == 0.0:
        return -np.log(r)
    return sgn * r ** (-s)


@njit
def _dgE(r, s, sgn):
    if s == 0.0:
        return -1.0 / r
    if s == 0.5:
        return -sgn * 0.5 / (r * np.sqrt(r))
    return -sgn * s * r ** (-s - 1.0)


@njit
def _chi(u):
    if u <= CHI_INNER:
        return 1.0, 0.0
    if u >= CHI_OUTER:
        return 0.0, 0.0
    wd = CHI_OUTER - CHI_INNER
    t = (u - CHI_INNER) / wd
    val = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    dval = -30.0 * t * t * (1.0 - t) * (1.0 - t) / wd
    return val, dval


@njit
def _reg_value(r, s, sgn, eps):
    if eps > 0.0 and r < CHI_OUTER * eps:
        c, _ = _chi(r / eps)
        return _gE(r, s, sgn) * (1.0 - c) if c < 1.0 else 0.0
    return _gE(r, s, sgn)


@njit
def _reg_slope(r, s, sgn, eps):
    """d/dr of the (optionally blended) singular part."""
    if eps > 0.0 and r < CHI_OUTER * eps:
        c, dc = _chi(r / eps)
        if c == 1.0:
            return 0.0
        return _dgE(r, s, sgn) * (1.0 - c) - _gE(r, s, sgn) * dc / eps
    return _dgE(r, s, sgn)


@njit
def _wrap(y):
    return y - np.floor(y + 0.5)


@njit
def _smooth1(y, tab, h, ghost, w):
    """S(y) and dS/dy in d = 1."""
    u = abs(y)
    t = u / h
    i = int(t)
    _lag6(t - i, w)
    b = i + ghost - 2
    v = 0.0
    dv = 0.0
    for a in range(6):
        v += w[a] * tab[0, b + a]
        dv += w[a] * tab[1, b + a]
    return v, dv if y >= 0.0 else -dv


@njit
def _smooth2(y0, y1, tab, h, ghost, w0, w1, out, c0, c1):
    """Table components ``c0 <= c < c1`` into ``out[c]`` (d = 2).

    Component 0 is S, components 1 and 2 are grad S. Skipping unused
    components matters: the d = 2 table does not fit in cache.
    """
    t0 = abs(y0) / h
    t1 = abs(y1) / h
    i0 = int(t0)
    i1 = int(t1)
    _lag6(t0 - i0, w0)
    _lag6(t1 - i1, w1)
    b0 = i0 + ghost - 2
    b1 = i1 + ghost - 2
    for c in range(c0, c1):
        acc = 0.0
        for a in range(6):
            row = 0.0
            for b in range(6):
                row += w1[b] * tab[c, b0 + a, b1 + b]
            acc += w0[a] * row
        out[c] = acc
    if c1 > 1:
        if y0 < 0.0:
            out[1] = -out[1]
        if y1 < 0.0:
            out[2] = -out[2]


@njit
def _dsmooth1(y, tab, inv_h, ghost):
    """dS/dy only (d = 1); Lagrange weights kept in registers."""
    t = abs(y) * inv_h
    i = int(t)
    p = t - i
    a0 = p + 2.0
    a1 = p + 1.0
    a3 = p - 1.0
    a4 = p - 2.0
    a5 = p - 3.0
    l01 = a0 * a1
    l45 = a4 * a5
    pa3 = p * a3
    b = i + ghost - 2
    dv = (-(a1 * pa3 * l45) * tab[1, b] + 5.0 * (a0 * pa3 * l45) * tab[1, b + 1]
          - 10.0 * (l01 * a3 * l45) * tab[1, b + 2] + 10.0 * (l01 * p * l45) * tab[1, b + 3]
          - 5.0 * (l01 * pa3 * a5) * tab[1, b + 4] + (l01 * pa3 * a4) * tab[1, b + 5]) * (1.0 / 120.0)
    return dv if y >= 0.0 else -dv


# -- d = 1 -------------------------------------------------------------------------------------

@njit
def pair_forces_1d_nb(x, tab, h, ghost, s, sgn, eps):
    n = x.shape[0]
    f = np.zeros(n)
    inv_h = 1.0 / h
    for i in range(n):
        xi = x[i]
        fi = 0.0
        for j in range(i + 1, n):
            y = _wrap(xi - x[j])
            gr = _dsmooth1(y, tab, inv_h, ghost)
            if y > 0.0:
                gr += _reg_slope(y, s, sgn, eps)
            elif y < 0.0:
                gr -= _reg_slope(-y, s, sgn, eps)
            fi += gr
            f[j] -= gr
        f[i] += fi
    return f


@njit
def pair_energy_1d_nb(x, tab, h, ghost, s, sgn):
    n = x.shape[0]
    tot = 0.0
    w = np.empty(6)
    for i in range(n):
        for j in range(i + 1, n):
            y = _wrap(x[i] - x[j])
            if y == 0.0:
                return np.nan
            sv, _ = _smooth1(y, tab, h, ghost, w)
            tot += sv + _gE(abs(y), s, sgn)
    return tot


@njit
def pair_energy_trunc_1d_nb(x, eta, tab, h, ghost, s, sgn):
    n = x.shape[0]
    tot = 0.0
    w = np.empty(6)
    for i in range(n):
        cap = _gE(eta[i], s, sgn)
        for j in range(n):
            if j == i:
                continue
            y = _wrap(x[i] - x[j])
            u = abs(y)
            sv, _ = _smooth1(y, tab, h, ghost, w)
            if u <= eta[i]:
                tot += sv + cap
            else:
                tot += sv + min(cap, _gE(u, s, sgn))
    return tot


@njit
def pair_transport_1d_nb(x, v, tab, h, ghost, s, sgn):
    n = x.shape[0]
    tot = 0.0
    w = np.empty(6)
    for i in range(n):
        for j in range(i + 1, n):
            y = _wrap(x[i] - x[j])
            if y == 0.0:
                return np.nan
            _, gr = _smooth1(y, tab, h, ghost, w)
            gr += _dgE(abs(y), s, sgn) * (1.0 if y >= 0.0 else -1.0)
            tot += (v[i] - v[j]) * gr
    return 2.0 * tot


@njit
def eval_points_1d_nb(y, tab, h, ghost, s, sgn, eps, singular):
    m = y.shape[0]
    g = np.empty(m)
    grad = np.empty((m, 1))
    w = np.empty(6)
    for k in range(m):
        yy = _wrap(y[k, 0])
        sv, ds = _smooth1(yy, tab, h, ghost, w)
        val, slope = _add_singular(abs(yy), s, sgn, eps, singular)
        g[k] = sv + val
        grad[k, 0] = ds + slope * (1.0 if yy >= 0.0 else -1.0)
    return g, grad


# -- d = 2 -------------------------------------------------------------------------------------

@njit
def pair_forces_2d_nb(x, tab, h, ghost, s, sgn, eps):
    n = x.shape[0]
    f = np.zeros((n, 2))
    w0 = np.empty(6)
    w1 = np.empty(6)
    out = np.empty(3)
    for i in range(n):
        for j in range(i + 1, n):
            y0 = _wrap(x[i, 0] - x[j, 0])
            y1 = _wrap(x[i, 1] - x[j, 1])
            _smooth2(y0, y1, tab, h, ghost, w0, w1, out, 1, 3)
            g0 = out[1]
            g1 = out[2]
            r = np.sqrt(y0 * y0 + y1 * y1)
            if r > 0.0:
                fr = _reg_slope(r, s, sgn, eps) / r
                g0 += fr * y0
                g1 += fr * y1
            f[i, 0] += g0
            f[i, 1] += g1
            f[j, 0] -= g0
            f[j, 1] -= g1
    return f


@njit
def pair_energy_2d_nb(x, tab, h, ghost, s, sgn):
    n = x.shape[0]
    tot = 0.0
    w0 = np.empty(6)
    w1 = np.empty(6)
    out = np.empty(3)
    for i in range(n):
        for j in range(i + 1, n):
            y0 = _wrap(x[i, 0] - x[j, 0])
            y1 = _wrap(x[i, 1] - x[j, 1])
            r = np.sqrt(y0 * y0 + y1 * y1)
            if r == 0.0:
                return np.nan
            _smooth2(y0, y1, tab, h, ghost, w0, w1, out, 0, 1)
            tot += out[0] + _gE(r, s, sgn)
    return tot


@njit
def pair_energy_trunc_2d_nb(x, eta, tab, h, ghost, s, sgn):
    n = x.shape[0]
    tot = 0.0
    w0 = np.empty(6)
    w1 = np.empty(6)
    out = np.empty(3)
    for i in range(n):
        cap = _gE(eta[i], s, sgn)
        for j in range(n):
            if j == i:
                continue
            y0 = _wrap(x[i, 0] - x[j, 0])
            y1 = _wrap(x[i, 1] - x[j, 1])
            r = np.sqrt(y0 * y0 + y1 * y1)
            _smooth2(y0, y1, tab, h, ghost, w0, w1, out, 0, 1)
            if r <= eta[i]:
                tot += out[0] + cap
            else:
                tot += out[0] + min(cap, _gE(r, s, sgn))
    return tot


@njit
def pair_transport_2d_nb(x, v, tab, h, ghost, s, sgn):
    n = x.shape[0]
    tot = 0.0
    w0 = np.empty(6)
    w1 = np.empty(6)
    out = np.empty(3)
    for i in range(n):
        for j in range(i + 1, n):
            y0 = _wrap(x[i, 0] - x[j, 0])
            y1 = _wrap(x[i, 1] - x[j, 1])
            r = np.sqrt(y0 * y0 + y1 * y1)
            if r == 0.0:
                return np.nan
            _smooth2(y0, y1, tab, h, ghost, w0, w1, out, 1, 3)
            fr = _dgE(r, s, sgn) / r
            g0 = out[1] + fr * y0
            g1 = out[2] + fr * y1
            tot += (v[i, 0] - v[j, 0]) * g0 + (v[i, 1] - v[j, 1]) * g1
    return 2.0 * tot


@njit
def eval_points_2d_nb(y, tab, h, ghost, s, sgn, eps, singular):
    m = y.shape[0]
    g = np.empty(m)
    grad = np.empty((m, 2))
    w0 = np.empty(6)
    w1 = np.empty(6)
    out = np.empty(3)
    for k in range(m):
        y0 = _wrap(y[k, 0])
        y1 = _wrap(y[k, 1])
        _smooth2(y0, y1, tab, h, ghost, w0, w1, out, 0, 3)
        r = np.sqrt(y0 * y0 + y1 * y1)
        val, slope = _add_singular(r, s, sgn, eps, singular)
        g[k] = out[0] + val
        if r > 0.0:
            grad[k, 0] = out[1] + slope * y0 / r
            grad[k, 1] = out[2] + slope * y1 / r
        else:
            grad[k, 0] = out[1] + slope
            grad[k, 1] = out[2] + slope
    return g, grad


@njit
def _add_singular(r, s, sgn, eps, singular):
    """Value and radial slope added to the smooth part.

    ``singular``: 0 nothing, 1 the (blended) Euclidean kernel, 2 the kernel
    capped at radius ``eps``.
    """
    if singular == 1:
        if r == 0.0:
            if eps == 0.0:
                return np.nan, np.nan
            return 0.0, 0.0
        return _reg_value(r, s, sgn, eps), _reg_slope(r, s, sgn, eps)
    if singular == 2:
        cap = _gE(eps, s, sgn)
        if r <= eps:
            return cap, 0.0
        return min(cap, _gE(r, s, sgn)), _dgE(r, s, sgn)
    return 0.0, 0.0


# -- numpy fallbacks ---------------------------------------------------------------------------

_DEN = np.array([-120.0, 24.0, -12.0, 12.0, -24.0, 120.0])
_OFF = np.arange(-2, 4, dtype=float)


def _lag6_np(p):
    a = p[..., None] - _OFF
    w = np.empty(p.shape + (6,))
    for j in range(6):
        w[..., j] = np.prod(np.delete(a, j, axis=-1), axis=-1)
    return w / _DEN


def _smooth_np(y, tab, h, ghost, want_grad=True):
    """Rows: S and (optionally) grad S at wrapped displacements ``y`` (m, d)."""
    m, d = y.shape
    t = np.abs(y) / h
    i = t.astype(np.int64)
    w = _lag6_np(t - i)
    base = i + ghost - 2
    ncomp = d + 1 if want_grad else 1
    out = np.empty((ncomp, m))
    if d == 1:
        idx = base[:, 0, None] + np.arange(6)
        for c in range(ncomp):
            out[c] = np.sum(w[:, 0] * tab[c][idx], axis=1)
    else:
        i0 = base[:, 0, None, None] + np.arange(6)[:, None]
        i1 = base[:, 1, None, None] + np.arange(6)[None, :]
        ww = w[:, 0, :, None] * w[:, 1, None, :]
        for c in range(ncomp):
            out[c] = np.sum(ww * tab[c][i0, i1], axis=(1, 2))
    if want_grad:
        out[1:] *= np.where(y >= 0.0, 1.0, -1.0).T
    return out


def _gE_np(r, s, sgn):
    with np.errstate(divide="ignore"):
        return -np.log(r) if s == 0.0 else sgn * r ** (-s)


def _dgE_np(r, s, sgn):
    with np.errstate(divide="ignore"):
        return -1.0 / r if s == 0.0 else -sgn * s * r ** (-s - 1.0)


def _chi_np(u):
    wd = CHI_OUTER - CHI_INNER
    t = np.clip((u - CHI_INNER) / wd, 0.0, 1.0)
    return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t), -30.0 * t * t * (1.0 - t) ** 2 / wd


def _reg_parts_np(r, s, sgn, eps):
    """(value, d/dr) of the blended singular part; zero where chi == 1."""
    with np.errstate(divide="ignore", invalid="ignore"):
        val = _gE_np(r, s, sgn)
        der = _dgE_np(r, s, sgn)
        if eps > 0.0:
            c, dc = _chi_np(r / eps)
            val, der = val * (1.0 - c), der * (1.0 - c) - val * dc / eps
            inner = r <= CHI_INNER * eps
            val = np.where(inner, 0.0, val)
            der = np.where(inner, 0.0, der)
    return val, der


def _wrap_np(y):
    return y - np.floor(y + 0.5)


def _norm(y):
    return np.sqrt(np.sum(y * y, axis=-1))


def eval_points_np(y, tab, h, ghost, s, sgn, eps, singular):
    y = _wrap_np(np.asarray(y, dtype=float))
    sm = _smooth_np(y, tab, h, ghost)
    r = _norm(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(r[:, None] > 0.0, y / r[:, None], 0.0)
    g = sm[0].copy()
    slope = np.zeros_like(r)
    if singular == 1:
        val, der = _reg_parts_np(r, s, sgn, eps)
        pos = r > 0.0
        g[pos] += val[pos]
        slope[pos] = der[pos]
        if eps == 0.0:
            g[~pos] = np.nan
            slope[~pos] = np.nan
    elif singular == 2:
        cap = _gE_np(np.float64(eps), s, sgn)
        far = r > eps
        safe = np.where(far, r, 1.0)
        g += np.where(far, np.minimum(cap, _gE_np(safe, s, sgn)), cap)
        slope = np.where(far, _dgE_np(safe, s, sgn), 0.0)
    grad = sm[1:].T + slope[:, None] * unit
    return g, grad


def _row_blocks(n, size=128):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def _upper_pairs(n):
    for a, b in _row_blocks(n):
        ii, jj = np.nonzero(np.arange(a, b)[:, None] < np.arange(n)[None, :])
        yield ii + a, jj


def pair_forces_np(x, tab, h, ghost, s, sgn, eps):
    n, d = x.shape
    f = np.zeros((n, d))
    for a, b in _row_blocks(n):
        y = _wrap_np(x[a:b, None, :] - x[None, :, :]).reshape(-1, d)
        sm = _smooth_np(y, tab, h, ghost)
        r = _norm(y)
        _, der = _reg_parts_np(r, s, sgn, eps)
        with np.errstate(divide="ignore", invalid="ignore"):
            fr = np.where(r > 0.0, der / r, 0.0)
        gr = (sm[1:].T + fr[:, None] * y).reshape(b - a, n, d)
        rows = np.arange(a, b)
        gr[rows - a, rows, :] = 0.0
        f[a:b] = gr.sum(axis=1)
    return f


def pair_energy_np(x, tab, h, ghost, s, sgn):
    tot = 0.0
    for ii, jj in _upper_pairs(x.shape[0]):
        y = _wrap_np(x[ii] - x[jj])
        r = _norm(y)
        if np.any(r == 0.0):
            return np.nan
        sm = _smooth_np(y, tab, h, ghost, want_grad=False)
        tot += float(np.sum(sm[0] + _gE_np(r, s, sgn)))
    return tot


def pair_energy_trunc_np(x, eta, tab, h, ghost, s, sgn):
    n, d = x.shape
    tot = 0.0
    for a, b in _row_blocks(n):
        y = _wrap_np(x[a:b, None, :] - x[None, :, :]).reshape(-1, d)
        sm = _smooth_np(y, tab, h, ghost, want_grad=False)[0].reshape(b - a, n)
        r = _norm(y).reshape(b - a, n)
        cap = _gE_np(eta[a:b], s, sgn)[:, None]
        ge = _gE_np(np.where(r > 0.0, r, 1.0), s, sgn)
        val = sm + np.where(r <= eta[a:b, None], cap, np.minimum(cap, ge))
        rows = np.arange(a, b)
        val[rows - a, rows] = 0.0
        tot += float(val.sum())
    return tot


def pair_transport_np(x, v, tab, h, ghost, s, sgn):
    v = np.asarray(v, dtype=float).reshape(x.shape)
    tot = 0.0
    for ii, jj in _upper_pairs(x.shape[0]):
        y = _wrap_np(x[ii] - x[jj])
        r = _norm(y)
        if np.any(r == 0.0):
            return np.nan
        sm = _smooth_np(y, tab, h, ghost)
        gr = sm[1:].T + (_dgE_np(r, s, sgn) / r)[:, None] * y
        tot += float(np.sum((v[ii] - v[jj]) * gr))
    return 2.0 * tot


# -- dispatch ----------------------------------------------------------------------------------
# Positions arrive as (N, d); the d = 1 loops take a flat vector.

def _flat(x):
    return np.ascontiguousarray(x[:, 0], dtype=float)


def _nb_forces(x, *tab):
    if x.shape[1] == 1:
        return pair_forces_1d_nb(_flat(x), *tab)[:, None]
    return pair_forces_2d_nb(np.ascontiguousarray(x, dtype=float), *tab)


def _nb_energy(x, *tab):
    if x.shape[1] == 1:
        return pair_energy_1d_nb(_flat(x), *tab)
    return pair_energy_2d_nb(np.ascontiguousarray(x, dtype=float), *tab)


def _nb_energy_trunc(x, eta, *tab):
    eta = np.ascontiguousarray(eta, dtype=float)
    if x.shape[1] == 1:
        return pair_energy_trunc_1d_nb(_flat(x), eta, *tab)
    return pair_energy_trunc_2d_nb(np.ascontiguousarray(x, dtype=float), eta, *tab)


def _nb_transport(x, v, *tab):
    v = np.ascontiguousarray(v, dtype=float).reshape(x.shape)
    if x.shape[1] == 1:
        return pair_transport_1d_nb(_flat(x), _flat(v), *tab)
    return pair_transport_2d_nb(np.ascontiguousarray(x, dtype=float), v, *tab)


def _nb_eval(y, *tab):
    y = np.ascontiguousarray(y, dtype=float)
    if y.shape[1] == 1:
        return eval_points_1d_nb(y, *tab)
    return eval_points_2d_nb(y, *tab)


NUMBA_KERNELS = dict(forces=_nb_forces, energy=_nb_energy, energy_trunc=_nb_energy_trunc,
                     transport=_nb_transport, eval_points=_nb_eval)
NUMPY_KERNELS = dict(forces=pair_forces_np, energy=pair_energy_np, energy_trunc=pair_energy_trunc_np,
                     transport=pair_transport_np, eval_points=eval_points_np)
KERNELS = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

pair_forces = KERNELS["forces"]
pair_energy = KERNELS["energy"]
pair_energy_truncated = KERNELS["energy_trunc"]
pair_transport = KERNELS["transport"]
eval_points = KERNELS["eval_points"]
