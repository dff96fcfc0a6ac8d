"""Multi-run studies, rate fits and reproducible artifacts.

Every study returns a :class:`StudyResult` (named CSV tables, a summary
dict and pass/fail checks) and can be written to a directory together with
a ``manifest.json`` that is sufficient to rerun it. Floats are written with
``%.17g`` so reruns compare byte for byte.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import __version__, _accel
from . import pde as pde_mod
from .diagnostics import calibrate_me_constant, fi_ratio, modulated_energy
from .errors import FitError, ParameterError, StudyError
from .grid import GridField, grid_points, lp_norm
from .particles import default_eps_reg, initial_config, simulate
from .pde import PdeConfig, _linfit, initial_profile
from .riesz import RieszParams, build_table

__all__ = [
    "KINDS",
    "StudyConfig",
    "StudyResult",
    "geometric_record_grid",
    "fit_powerlaw",
    "fit_exp",
    "calibrate",
    "chaos_study",
    "uniform_time_study",
    "relaxation_study",
    "fi_sweep",
    "me_check",
    "run_study",
    "write_study",
    "rerun_from_manifest",
    "load_config",
]

KINDS = ("chaos_scaling", "uniform_time", "relaxation", "fi_sweep")
FLOAT_FMT = "%.17g"
CALIB_REPLICA_BASE = 1 << 32  # calibration configs never share a stream with an ensemble replica
ROUNDOFF_FLOOR = 1e-11  # relative level below which a decaying diagnostic is treated as noise


# -- fits ---------------------------------------------------------------------------------------

def _points(points):
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise FitError("points must be (x, value) pairs")
    if arr.shape[0] < 3:
        raise FitError("need at least three points")
    if np.any(arr[:, 1] <= 0):
        raise FitError("values must be positive")
    return arr[:, 0], arr[:, 1]


def fit_powerlaw(points, errors=None):
    """Slope of ``log value`` against ``log N`` with its standard error.

    With ``errors`` (absolute standard errors of the values) the fit is
    weighted by ``(value / error)^2`` and the stderr is the larger of the
    propagated one and the residual-scaled one.
    """
    x, y = _points(points)
    if np.any(x <= 0):
        raise FitError("abscissae must be positive")
    if errors is None:
        return _linfit(np.log(x), np.log(y))
    return _wlinfit(np.log(x), np.log(y), np.asarray(errors, float) / y)


def _wlinfit(x, y, sig):
    if np.any(~(sig > 0)):
        raise FitError("errors must be positive")
    w = 1.0 / sig**2
    xm = (w @ x) / w.sum()
    ym = (w @ y) / w.sum()
    sxx = float(w @ (x - xm) ** 2)
    slope = float(w @ ((x - xm) * (y - ym))) / sxx
    resid = y - ym - slope * (x - xm)
    chi2 = float(w @ resid**2) / max(x.size - 2, 1)
    return slope, math.sqrt(max(chi2, 1.0) / sxx)


def fit_exp(points):
    """Rate ``r`` of ``value ~ exp(-r t)`` with its standard error."""
    t, y = _points(points)
    slope, err = _linfit(t, np.log(y))
    return -slope, err


def geometric_record_grid(t_end, n_linear=4, n_geometric=12, t_switch=None):
    """``0``, a linear phase up to ``t_switch``, then geometric spacing to ``t_end``."""
    if t_end <= 0:
        raise ParameterError("t_end must be positive")
    t_switch = t_end / 32.0 if t_switch is None else float(t_switch)
    if not 0 < t_switch < t_end:
        raise ParameterError("t_switch must lie in (0, t_end)")
    lin = np.linspace(0.0, t_switch, n_linear + 1)
    geo = np.geomspace(t_switch, t_end, n_geometric + 1)[1:]
    return [float(t) for t in np.concatenate([lin, geo])]


# -- configuration ------------------------------------------------------------------------------

@dataclass
class StudyConfig:
    """Inputs of one study; mirrors the ``[study]`` table of a TOML config."""

    kind: str = "chaos_scaling"
    d: int = 1
    s: float = 0.5
    flow: str = "gradient"
    sigma: float = 0.25
    N: list = field(default_factory=lambda: [128, 256, 512, 1024])
    replicas: int = 32
    dt: float = 0.01
    t_end: float = 8.0
    seed: int = 20240601
    grid: int = 256
    pde_dt: float = 1e-3
    initial: dict = field(default_factory=lambda: dict(name="single_mode", eps=0.3, k=1))
    record: dict = field(default_factory=lambda: dict(n_linear=4, n_geometric=12))
    cutoff: float = 0.125
    table_grid: int = 256
    eps_reg: float | None = None
    kmax: int | None = None
    calib_N: int | None = None
    calib_configs: int = 200
    safety: float = 2.0
    control: bool = True
    workers: int = 1
    configs: int = 100
    v_per_config: int = 5
    v_kmax: int = 3
    v_amp: float = 0.1
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"kind must be one of {KINDS}")
        self.N = [int(n) for n in np.atleast_1d(self.N)]
        if any(b <= a for a, b in zip(self.N, self.N[1:])):
            raise ParameterError("N list must be strictly increasing")
        if self.N[0] < 2:
            raise ParameterError("N must be >= 2")
        if self.kind == "chaos_scaling" and self.replicas < 8:
            raise ParameterError("chaos_scaling needs at least 8 replicas")
        if self.replicas < 1 or self.dt <= 0 or self.t_end <= 0:
            raise ParameterError("replicas, dt and t_end must be positive")
        self.params  # validates d, s, flow, sigma
        if self.kind in ("chaos_scaling", "uniform_time") and not self.params.is_gradient:
            raise ParameterError("chaos studies require the gradient flow")

    @property
    def params(self):
        return RieszParams(self.d, self.s, self.flow, self.sigma)

    def record_times(self):
        return geometric_record_grid(self.t_end, **self.record)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        thresholds = data.pop("thresholds", {})
        extra = set(data) - set(cls.__dataclass_fields__)
        if extra:
            raise ParameterError(f"unknown study keys: {sorted(extra)}")
        return cls(thresholds=dict(thresholds), **data)


def load_config(path):
    """Read a TOML file with a ``[study]`` table (and optional ``[study.thresholds]``)."""
    import tomli

    with open(path, "rb") as fh:
        data = tomli.load(fh)
    return StudyConfig.from_dict(data.get("study", data))


@dataclass
class StudyResult:
    kind: str
    tables: dict  # name -> (header, rows)
    summary: dict
    checks: dict  # name -> bool

    @property
    def passed(self):
        return all(self.checks.values())


# -- shared pieces ------------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _table(d, s, table_grid, cutoff):
    return build_table(RieszParams(d, s), table_grid, cutoff)


def _study_table(cfg):
    return _table(cfg.d, float(cfg.s), cfg.table_grid, cfg.cutoff)


def _mu0(cfg):
    return initial_profile(cfg.initial, cfg.grid, cfg.d)


def calibrate(params, mu, N, configs, seed, table, kmax=None, safety=2.0):
    """``C_cal`` from ``configs`` i.i.d. samples of ``mu`` with ``N`` points.

    Returns ``(C_cal, breakdowns)``.
    """
    uniform = np.allclose(mu.values, 1.0)
    bds = []
    for k in range(configs):
        cfg = initial_config(params, N, seed, CALIB_REPLICA_BASE + k, None if uniform else mu)
        bds.append(modulated_energy(cfg, mu, table, kmax))
    return calibrate_me_constant(bds, safety), bds


def _pde_snapshots(cfg, times, interaction):
    pc = PdeConfig(d=cfg.d, s=cfg.s, flow=cfg.flow, sigma=cfg.sigma, grid=cfg.grid, dt=cfg.pde_dt,
                   t_end=cfg.t_end, record_times=times, snapshot_times=times, initial=cfg.initial,
                   interaction=interaction)
    out = pde_mod.run(pc)
    return [out.snapshots[float(t)] for t in times]


def _replica_task(args):
    """F_N along one replica trajectory (picklable for worker pools)."""
    d, s, flow, sigma, table_grid, cutoff, N, seed, r, dt, times, snaps, mu0, eps, interaction, kmax = args
    params = RieszParams(d, s, flow, sigma)
    table = _table(d, s, table_grid, cutoff)
    mu0f = None if mu0 is None else GridField(mu0, d)
    cfg = initial_config(params, N, seed, r, mu0f)
    traj = simulate(cfg, table, dt, times, eps, interaction, None, True)
    if traj["status"] != "ok":
        return None
    return [modulated_energy(x, GridField(m, d), table, kmax).F_N for x, m in zip(traj["positions"], snaps)]


def _ensemble_energies(cfg, N, times, snaps, interaction, seed):
    """``(replicas_ok, F)`` with ``F[r, k] = F_N`` of replica ``r`` at record ``k``."""
    mu0 = snaps[0].values
    uniform = np.allclose(mu0, 1.0)
    eps = cfg.eps_reg if cfg.eps_reg is not None else default_eps_reg(N, cfg.d, lp_norm(snaps[0], np.inf))
    vals = [m.values for m in snaps]
    tasks = [(cfg.d, float(cfg.s), cfg.flow, cfg.sigma, cfg.table_grid, cfg.cutoff, N, seed, r, cfg.dt, times,
              vals, None if uniform else mu0, eps, interaction, cfg.kmax) for r in range(cfg.replicas)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            res = list(pool.map(_replica_task, tasks))
    else:
        res = [_replica_task(t) for t in tasks]
    ok = [r for r in res if r is not None]
    failed = len(res) - len(ok)
    if failed > 0.1 * len(res):
        raise StudyError(f"N={N}: {failed} of {len(res)} replicas blew up")
    return len(ok), np.array(ok)


def _ehat_table(params, N, times, snaps, F, C_cal):
    """Per-time rows of the chaos statistic and the ``E_hat`` series."""
    rows, ehat = [], []
    for k, (t, m) in enumerate(zip(times, snaps)):
        mu_inf = lp_norm(m, np.inf)
        log_off = math.log(N * mu_inf) / (2 * params.d * N) if params.s == 0.0 else 0.0
        power = mu_inf ** (params.s / params.d) * N ** (params.s / params.d - 1.0)
        mean = float(F[:, k].mean())
        se = float(F[:, k].std(ddof=1) / math.sqrt(F.shape[0])) if F.shape[0] > 1 else float("nan")
        e = mean + log_off + C_cal * power
        ehat.append(e)
        rows.append([t, mean, se, mu_inf, log_off, power, log_off + C_cal * power, e, F.shape[0]])
    return rows, np.array(ehat)


PER_N_HEADER = ["t", "mean_F_N", "stderr_F_N", "mu_inf", "log_offset", "power_scale", "offset", "E_hat", "replicas_ok"]


def _uniform_ratio(times, ehat):
    times = np.asarray(times)
    T = times[-1]
    late = ehat[times >= T / 2]
    return float(late.max() / ehat[0])


# -- studies ------------------------------------------------------------------------------------

def _run_branch(cfg, table, times, C_cal, tag, interaction, log):
    """Per-N tables, fitted slope, its stderr and the largest-N uniform ratio of one branch."""
    params = cfg.params
    snaps = _pde_snapshots(cfg, times, interaction)
    tables, sum_rows, pts, errs = {}, [], [], []
    for N in cfg.N:
        t0 = time.perf_counter()
        ok, F = _ensemble_energies(cfg, N, times, snaps, interaction, cfg.seed)
        rows, ehat = _ehat_table(params, N, times, snaps, F, C_cal)
        tables[f"{tag}_N{N}"] = (PER_N_HEADER, rows)
        ratio = _uniform_ratio(times, ehat)
        sum_rows.append([N, float(ehat.max()), float(ehat[-1]), ratio, ok])
        pts.append((N, ehat[-1]))
        errs.append(rows[-1][2])
        log(f"[{tag}] N={N}: E_hat(T)={ehat[-1]:.6g} sup={ehat.max():.6g} ratio={ratio:.4g} "
            f"({time.perf_counter() - t0:.1f}s)")
    if all(p[1] > 0 for p in pts):
        slope, err = fit_powerlaw(pts, errs if all(e > 0 for e in errs) else None)
    else:
        slope, err = float("nan"), float("nan")
    sum_rows.append(["slope", slope, err, float("nan"), float("nan")])
    tables[f"{tag}_summary"] = (["N", "sup_E_hat", "final_E_hat", "uniform_ratio", "replicas_ok"], sum_rows)
    return tables, slope, err, sum_rows[-2][3]


def chaos_study(cfg, log=None):
    """Scaling of the ensemble modulated energy with ``N``.

    For each ``N`` the SDE ensemble (i.i.d. samples of ``mu^0``) is compared
    with the PDE solution on the record grid through

        E_hat_N(t) = mean_r F_N(x^t_r, mu^t) + log offset
                     + C_cal ||mu^t||_inf^{s/d} N^{s/d - 1}.

    The relative entropy part of the modulated free energy vanishes at
    ``t = 0`` (product initial law) and is not estimated afterwards, so
    ``E_hat`` is a lower proxy for the full quantity. A zero-interaction
    control (forces off, heat-only PDE) is run alongside when
    ``cfg.control`` is set.
    """
    log = log or (lambda msg: None)
    params = cfg.params
    table = _study_table(cfg)
    times = cfg.record_times()
    mu0 = _mu0(cfg)
    calib_N = cfg.calib_N or cfg.N[0]
    C_cal, _ = calibrate(params, mu0, calib_N, cfg.calib_configs, cfg.seed, table, cfg.kmax, cfg.safety)
    log(f"C_cal = {C_cal:.6g} (N={calib_N}, {cfg.calib_configs} configs)")

    branches = [("main", True)] + ([("control", False)] if cfg.control else [])
    tables, summary = {}, {"C_cal": C_cal}
    for tag, interaction in branches:
        tabs, slope, err, ratio = _run_branch(cfg, table, times, C_cal, tag, interaction, log)
        tables.update(tabs)
        summary[f"{tag}_slope"] = slope
        summary[f"{tag}_stderr"] = err
        summary[f"{tag}_uniform_ratio"] = ratio

    target = params.s / params.d - 1.0
    th = cfg.thresholds
    checks = {}
    lo, hi = th.get("slope_min", target - 0.25), th.get("slope_max", target + 0.25)
    checks["slope_in_range"] = bool(lo <= summary["main_slope"] <= hi)
    checks["uniform_in_time"] = bool(summary["main_uniform_ratio"] <= th.get("uniform_ratio_max", 2.0))
    if cfg.control:
        k = th.get("control_sigmas", 2.0)
        checks["control_slope"] = bool(abs(summary["control_slope"] - target) <= k * summary["control_stderr"])
    summary["target_slope"] = target
    return StudyResult("chaos_scaling", tables, summary, checks)


def uniform_time_study(cfg, log=None):
    """Uniform-in-time ratio ``sup_{[T/2,T]} E_hat / E_hat(t_0)`` for every ``N``."""
    cfg = StudyConfig.from_dict({**cfg.to_dict(), "kind": "chaos_scaling", "control": False,
                                 "replicas": max(cfg.replicas, 8)})
    res = chaos_study(cfg, log)
    rows = [r for r in res.tables["main_summary"][1] if r[0] != "slope"]
    limit = cfg.thresholds.get("uniform_ratio_max", 2.0)
    checks = {f"uniform_N{r[0]}": bool(r[3] <= limit) for r in rows}
    return StudyResult("uniform_time", res.tables, res.summary, checks)


def relaxation_study(cfg, log=None):
    """One PDE run with fitted exponential rates of the decaying diagnostics."""
    log = log or (lambda msg: None)
    times = cfg.record_times()
    pc = PdeConfig(d=cfg.d, s=cfg.s, flow=cfg.flow, sigma=cfg.sigma, grid=cfg.grid, dt=cfg.pde_dt,
                   t_end=cfg.t_end, record_times=times, initial=cfg.initial)
    out = pde_mod.run(pc)
    rows = [r.row() for r in out.records]
    tables = {"diagnostics": (list(pde_mod.RECORD_COLUMNS), rows)}
    t = out.times
    window = cfg.thresholds.get("window", (0.0, cfg.t_end))
    keep = (t >= window[0]) & (t <= window[1])
    rate_rows, summary = [], {}
    cols = ["free_energy", "l2", "linf", "grad_l2"] if cfg.params.is_gradient else ["entropy", "l2", "linf", "grad_l2"]
    for col in cols:
        y = out.series(col)
        # samples that have decayed to round-off carry no rate information
        ok = keep & (y > ROUNDOFF_FLOOR * np.abs(y).max())
        try:
            rate, err = fit_exp(np.column_stack([t[ok], y[ok]]))
        except FitError:
            rate, err = float("nan"), float("nan")
        rate_rows.append([col, rate, err])
        summary[f"rate_{col}"] = rate
        log(f"{col}: rate {rate:.6g} +- {err:.2g}")
    tables["rates"] = (["quantity", "rate", "stderr"], rate_rows)
    bound = 8 * math.pi**2 * cfg.sigma
    summary["reference_rate"] = bound
    checks = {f"rate_{c}_positive": bool(summary[f"rate_{c}"] > 0) for c in cols}
    if "min_rate" in cfg.thresholds:
        checks["min_rate"] = bool(summary[f"rate_{cols[0]}"] >= cfg.thresholds["min_rate"])
    return StudyResult("relaxation", tables, summary, checks)


def _random_v(rng, n, d, kmax, amp):
    """Random band-limited vector field with ``max |v| = amp``."""
    x = grid_points(n, d)
    comps = []
    for _ in range(d):
        f = np.zeros((n,) * d)
        for k in np.ndindex(*((2 * kmax + 1,) * d)):
            kv = np.array(k) - kmax
            if not kv.any():
                continue
            a, b = rng.standard_normal(2)
            ph = 2 * np.pi * (x @ kv)
            f += a * np.cos(ph) + b * np.sin(ph)
        comps.append(f)
    vals = np.stack(comps)
    return GridField(amp * vals / np.abs(vals).max(), d)


def fi_sweep(cfg, log=None):
    """Max of ``fi_ratio`` over random configurations and fields ``v`` for each ``N``."""
    log = log or (lambda msg: None)
    params = cfg.params
    table = _study_table(cfg)
    mu = _mu0(cfg)
    calib_N = cfg.calib_N or cfg.N[0]
    C_cal, _ = calibrate(params, mu, calib_N, cfg.calib_configs, cfg.seed, table, cfg.kmax, cfg.safety)
    vrng = np.random.Generator(np.random.Philox(key=[cfg.seed, 7]))
    vs = [_random_v(vrng, cfg.grid, cfg.d, cfg.v_kmax, cfg.v_amp) for _ in range(cfg.v_per_config)]
    uniform = np.allclose(mu.values, 1.0)
    rows, pts = [], []
    for N in cfg.N:
        ratios, flags = [], 0
        for c in range(cfg.configs):
            x = initial_config(params, N, cfg.seed, c, None if uniform else mu)
            bd = modulated_energy(x, mu, table, cfg.kmax)
            for v in vs:
                r = fi_ratio(x, mu, v, table, C_cal, cfg.kmax, breakdown=bd)
                flags += r.calibration_flag
                ratios.append(r.ratio)
        ratios = np.array(ratios)
        rows.append([N, float(ratios.max()), float(np.median(ratios)), flags])
        pts.append((N, ratios.max()))
        log(f"N={N}: max ratio {ratios.max():.6g}, median {np.median(ratios):.6g}, flags {flags}")
    slope, err = fit_powerlaw(pts)
    rows.append(["slope", slope, err, float("nan")])
    summary = dict(C_cal=C_cal, slope=slope, stderr=err)
    checks = {"slope_bound": bool(slope <= cfg.thresholds.get("slope_max", 0.1)),
              "no_flags": all(r[3] == 0 for r in rows[:-1])}
    return StudyResult("fi_sweep", {"fi_sweep": (["N", "max_ratio", "median_ratio", "flags"], rows)}, summary, checks)


def me_check(params, N_list, configs, seed, mu, table, calib_N=64, calib_configs=200, safety=2.0, kmax=None):
    """Lower-bound audit: calibrate at ``calib_N`` then count violations per ``N``.

    Returns ``(C_cal, rows)`` with rows ``(N, configs, min_shifted, violations)``
    where ``shifted = F_N + log offset + C_cal * power_scale``.
    """
    C_cal, _ = calibrate(params, mu, calib_N, calib_configs, seed, table, kmax, safety)
    uniform = np.allclose(mu.values, 1.0)
    rows = []
    for N in N_list:
        vals = np.array([modulated_energy(initial_config(params, N, seed, c, None if uniform else mu),
                                          mu, table, kmax).shifted(C_cal) for c in range(configs)])
        rows.append([int(N), int(configs), float(vals.min()), int(np.sum(vals < 0))])
    return C_cal, rows


STUDIES = dict(chaos_scaling=chaos_study, uniform_time=uniform_time_study, relaxation=relaxation_study,
               fi_sweep=fi_sweep)


def run_study(cfg, log=None):
    return STUDIES[cfg.kind](cfg, log)


# -- artifacts ----------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def csv_bytes(header, rows):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(v) for v in r) + "\n")
    return buf.getvalue().encode()


def _versions():
    import scipy

    numba = _accel.numba_version()
    return dict(rieszlab=__version__, numpy=np.__version__, scipy=scipy.__version__, numba=numba,
                python=platform.python_version())


def write_study(result, cfg, out):
    """Write ``<table>.csv`` files, ``summary.json`` and ``manifest.json`` into ``out``."""
    os.makedirs(out, exist_ok=True)
    files = {}
    for name, (header, rows) in result.tables.items():
        data = csv_bytes(header, rows)
        with open(os.path.join(out, f"{name}.csv"), "wb") as fh:
            fh.write(data)
        files[f"{name}.csv"] = hashlib.sha256(data).hexdigest()
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(dict(summary=result.summary, checks=result.checks, passed=result.passed), fh, indent=2,
                  default=float)
    manifest = dict(kind=result.kind, config=cfg.to_dict(), seed=cfg.seed, versions=_versions(),
                    numba_kernels=_accel.USE_NUMBA, files=files)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def rerun_from_manifest(path, out, log=None):
    """Rerun the study described by a manifest into ``out``; returns (result, manifest, identical)."""
    with open(path) as fh:
        old = json.load(fh)
    cfg = StudyConfig.from_dict(old["config"])
    res = run_study(cfg, log)
    new = write_study(res, cfg, out)
    return res, new, new["files"] == old["files"]
