"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Lines are echoed through the terminal reporter as each test finishes and
repeated in the summary (see conftest.py), so they show up under pytest's
output capture. Runtime limits are part of each criterion.
"""
import math
import time

import numpy as np
import pytest
from scipy import special

from rieszlab import RieszParams, build_table, eval_g, fractional_laplacian, riesz_constant, synthesize_g
from rieszlab.experiments import (StudyConfig, chaos_study, fi_sweep, me_check, relaxation_study,
                                  rerun_from_manifest, write_study)
from rieszlab.grid import GridField, lp_norm, series_coefficients
from rieszlab.particles import NoiseStream, ParticleConfig, em_step, wrap
from rieszlab.pde import PdeConfig, derivative_decay_report, fit_exp_rate, initial_profile, run

RESULTS = {}


def report(num, ok, detail, elapsed=None, limit=None):
    if limit is not None:
        ok = ok and elapsed < limit
        detail = f"{detail}; {elapsed:.1f}s (limit {limit:g}s)"
    line = f"[acceptance {num:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[num] = line
    assert ok, line


def c_ds_oracle(d, s):
    """Closed-form constant from the Fourier transform of |x|^{-s} (or -log|x|)."""
    if s == 0:
        return 2 ** (d - 1) * math.pi ** (d / 2) * special.gamma(d / 2)
    val = 2 ** (d - s) * math.pi ** (d / 2) * special.gamma((d - s) / 2) / special.gamma(s / 2)
    return val if s > 0 else -val


# -- 1 --------------------------------------------------------------------------------------------

def test_01_spectral_identity():
    t0 = time.perf_counter()
    worst = 0.0
    cases = []
    for d, n in ((1, 256), (2, 64)):
        for s in sorted({max(d - 2, -0.9), 0.0, d - 1.0, d - 0.5}):
            p = RieszParams(d, s)
            c = c_ds_oracle(d, s)
            assert riesz_constant(d, s) == pytest.approx(c, rel=1e-13)
            coef = series_coefficients(fractional_laplacian(synthesize_g(p, n), d - s))
            mask = np.ones(coef.shape, bool)
            mask.flat[0] = False
            err = float(np.max(np.abs(coef[mask] - c)) / abs(c))
            worst = max(worst, err)
            cases.append((d, s))
    report(1, worst <= 1e-10, f"max rel err {worst:.2e} over (d,s) in {cases}", time.perf_counter() - t0, 10)


# -- 2 --------------------------------------------------------------------------------------------

def test_02_log_closed_form():
    t0 = time.perf_counter()
    table = build_table(RieszParams(1, 0.0))
    r = np.linspace(1e-3, 0.5, 500)
    x = np.concatenate([r, -r])
    err = float(np.max(np.abs(eval_g(x, table) + np.log(2 * np.sin(np.pi * np.abs(x))))))
    report(2, err <= 1e-8, f"max abs err {err:.2e} on {x.size} points", time.perf_counter() - t0, 5)


# -- 3 --------------------------------------------------------------------------------------------

def test_03_smooth_correction():
    t0 = time.perf_counter()
    table = build_table(RieszParams(2, 0.0))
    rng = np.random.default_rng(3)
    r = np.geomspace(1e-3, 0.125, 200)
    th = rng.uniform(0, 2 * np.pi, r.size)
    pts = np.column_stack([r * np.cos(th), r * np.sin(th)])

    def max_d2(h):
        f0 = table.smooth_part(pts)
        out = 0.0
        for e in np.eye(2):
            d2 = (table.smooth_part(pts + h * e) - 2 * f0 + table.smooth_part(pts - h * e)) / h**2
            out = max(out, float(np.abs(d2).max()))
        return out

    a, b = max_d2(1e-2), max_d2(5e-3)
    ratio = b / a
    report(3, 0.8 <= ratio <= 1.25, f"max |D2(g - g_E)| {a:.4g} -> {b:.4g}, ratio {ratio:.4f}",
           time.perf_counter() - t0, 30)


# -- 4 and 6 --------------------------------------------------------------------------------------

INIT_2D = dict(name="random_band", seed=1, kmax=3, eps=0.5)


@pytest.fixture(scope="module")
def coulomb_runs():
    t0 = time.perf_counter()
    grad = run(PdeConfig(d=2, s=0.0, flow="gradient", sigma=0.25, grid=128, dt=1e-3, t_end=1.0,
                         record_every=0.01, initial=INIT_2D))
    t_grad = time.perf_counter() - t0
    t0 = time.perf_counter()
    cons = run(PdeConfig(d=2, s=0.0, flow="conservative", sigma=0.25, grid=128, dt=1e-3, t_end=1.0,
                         record_every=0.01, initial=INIT_2D))
    return grad, cons, t_grad, time.perf_counter() - t0


def test_04_pde_conservation(coulomb_runs):
    grad, _, elapsed, _ = coulomb_runs
    mass = np.abs(grad.series("mass") - 1).max()
    mx = grad.series("max_mu")
    rise = float(np.max(np.diff(mx)))
    mn = grad.series("min_mu")
    drop = float(mn[0] - mn.min())
    ok = mass <= 1e-10 and rise <= 1e-8 and drop <= 1e-6
    report(4, ok, f"|mass-1| {mass:.1e}, max L^inf increase {rise:.1e}, min drop {drop:.1e}", elapsed, 120)


def test_06_free_energy_decay(coulomb_runs):
    grad, cons, t1, t2 = coulomb_runs
    sigma = 0.25
    t = grad.times
    env = np.exp(-8 * np.pi**2 * sigma * t)
    F = grad.series("free_energy")
    E = cons.series("entropy")
    rF = float(np.max(F / (F[0] * env)))
    rE = float(np.max(E / (E[0] * env)))
    report(6, rF <= 1.05 and rE <= 1.05, f"max F/(F0 e^(-8pi^2 sigma t)) {rF:.4f}, conservative Ent ratio {rE:.4f}",
           t1 + t2, 240)


# -- 5 --------------------------------------------------------------------------------------------

def _defects(dt):
    out = run(PdeConfig(d=2, s=0.0, flow="gradient", sigma=0.25, grid=64, dt=dt, t_end=0.2, record_every=dt,
                        initial=dict(name="single_mode", eps=0.3, k=1)))
    t, F, D = out.times, out.series("free_energy"), out.series("dissipation")
    slope = np.diff(F) / np.diff(t)
    Dm = 0.5 * (D[1:] + D[:-1])
    return np.abs(slope + Dm) / Dm


def test_05_dissipation_identity():
    t0 = time.perf_counter()
    a = _defects(5e-4)
    b = _defects(2.5e-4)
    ratio = a.max() / b.max()
    ok = a.max() <= 0.02 and 1.7 <= ratio <= 2.3
    report(5, ok, f"max defect {a.max():.2e} (dt=5e-4), {b.max():.2e} (dt=2.5e-4), ratio {ratio:.3f}",
           time.perf_counter() - t0, 120)


# -- 7 --------------------------------------------------------------------------------------------

def test_07_lp_decay_conservative():
    t0 = time.perf_counter()
    sigma = 0.25
    out = run(PdeConfig(d=2, s=0.0, flow="conservative", sigma=sigma, grid=64, dt=1e-3, t_end=1.0,
                        record_every=0.01, initial=INIT_2D))
    t, l2 = out.times, out.series("l2")
    rate, _ = fit_exp_rate(np.stack([t, l2]), (0.5, 1.0))
    C = rate / sigma
    bound = l2[0] * np.exp(-C * sigma * t)
    worst = float(np.max(l2 / bound))
    ok = C > 0 and worst <= 1.0 + 1e-12
    report(7, ok, f"fitted C {C:.3f} (4 pi^2 = {4 * np.pi**2:.3f}), max ||mu-1||/bound {worst:.6f}",
           time.perf_counter() - t0, 60)


# -- 8 --------------------------------------------------------------------------------------------

def test_08_hypercontractive_smoothing():
    t0 = time.perf_counter()
    sigma = 0.25
    taus = np.geomspace(1e-3, 1e-1, 25)
    bump = dict(name="bump", width=0.006, weight=0.5)
    ratios = {}
    for label, inter in (("interacting", True), ("heat", False)):
        out = run(PdeConfig(d=1, s=0.5, sigma=sigma, grid=1024, dt=1e-4, t_end=float(taus[-1] / sigma),
                            record_times=list(taus / sigma), initial=bump, interaction=inter))
        mu0 = initial_profile(bump, 1024, 1)
        l1 = lp_norm(mu0.with_values(mu0.values - 1.0), 1)
        tau = sigma * out.times
        keep = tau >= 1e-3 * (1 - 1e-9)
        ratios[label] = np.sqrt(tau[keep]) * out.series("linf")[keep] / l1
    C_heat = float(ratios["heat"].max())
    sup = float(ratios["interacting"].max())
    report(8, sup <= 1.05 * C_heat, f"sup ratio {sup:.4f} vs heat constant {C_heat:.4f}", time.perf_counter() - t0, 60)


# -- 9 --------------------------------------------------------------------------------------------

def test_09_derivative_decay():
    t0 = time.perf_counter()
    sigma = 0.25
    plateau = dict(name="plateau", width=0.25, edge=0.02, amp=0.5)
    mu0 = initial_profile(plateau, 512, 1)
    bound = 2 / math.sqrt(math.pi) * float(np.abs(mu0.values - 1).max())
    times = sorted(set(np.geomspace(1e-3, 1e-1, 25) / sigma) | set(np.linspace(0.2, 0.4, 11) / sigma))
    parts, ok = [], True
    for s in (0.0, 0.5):
        out = run(PdeConfig(d=1, s=s, sigma=sigma, grid=512, dt=2e-4, t_end=0.4 / sigma, record_times=times,
                            initial=plateau))
        rep = derivative_decay_report(out, 1, np.inf, late=(0.2 / sigma, 0.4 / sigma))
        ok = ok and rep["early_sup"] <= bound and rep["late_rate"] > 0
        parts.append(f"s={s}: sup {rep['early_sup']:.4f} (bound {bound:.4f}), late rate {rep['late_rate']:.3f}")
    report(9, ok, "; ".join(parts), time.perf_counter() - t0, 120)


# -- 10 -------------------------------------------------------------------------------------------

def test_10_noise_calibration():
    t0 = time.perf_counter()
    sigma, dt, N, steps = 0.25, 1e-3, 1000, 100
    p = RieszParams(1, 0.5, sigma=sigma)
    table = build_table(p)
    cfg = ParticleConfig(np.random.default_rng(0).uniform(-0.5, 0.5, (N, 1)), p)
    noise = NoiseStream(10, 0)
    incs = []
    for _ in range(steps):
        nxt = em_step(cfg, dt, noise, table, interaction=False)
        incs.append(wrap(nxt.positions - cfg.positions)[:, 0])
        cfg = nxt
    inc = np.concatenate(incs)
    var = float(np.mean(inc**2))
    se = float(np.std(inc**2, ddof=1) / math.sqrt(inc.size))
    z = (var - 2 * sigma * dt) / se
    report(10, abs(z) <= 3, f"variance {var:.6e} vs 2 sigma dt {2 * sigma * dt:.6e}, z = {z:.2f} over {inc.size} "
           "samples", time.perf_counter() - t0, 30)


# -- 11 -------------------------------------------------------------------------------------------

def test_11_me_lower_bound():
    t0 = time.perf_counter()
    uniform = GridField.constant(1.0, 64, 1)
    parts, ok = [], True
    for s in (0.0, 0.5):
        p = RieszParams(1, s)
        C, rows = me_check(p, [128, 256, 512, 1024], 200, 11, uniform, build_table(p), calib_N=64,
                           calib_configs=200, safety=2.0)
        bad = sum(r[3] for r in rows)
        ok = ok and bad == 0
        parts.append(f"s={s}: C_cal {C:.4f}, violations {bad}, min shifted {min(r[2] for r in rows):.3e}")
    report(11, ok, "; ".join(parts), time.perf_counter() - t0, 120)


# -- 12 -------------------------------------------------------------------------------------------

def test_12_fi_n_independence():
    t0 = time.perf_counter()
    cfg = StudyConfig(kind="fi_sweep", d=1, s=0.5, N=[32, 64, 128, 256, 512], configs=100, v_per_config=5,
                      replicas=1)
    res = fi_sweep(cfg)
    slope = res.summary["slope"]
    flags = sum(r[3] for r in res.tables["fi_sweep"][1][:-1])
    report(12, res.passed, f"slope {slope:.4f} +- {res.summary['stderr']:.4f} (max 0.1), calibration flags {flags}",
           time.perf_counter() - t0, 300)


# -- 13 and 14 ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def chaos():
    cfg = StudyConfig(kind="chaos_scaling", d=1, s=0.5, sigma=0.25, flow="gradient", N=[128, 256, 512, 1024],
                      replicas=32, t_end=8.0)
    t0 = time.perf_counter()
    res = chaos_study(cfg)
    return res, time.perf_counter() - t0


@pytest.mark.slow
def test_13_chaos_rate(chaos):
    res, elapsed = chaos
    sm = res.summary
    ok = res.checks["slope_in_range"] and res.checks["control_slope"]
    report(13, ok, f"slope {sm['main_slope']:.4f} +- {sm['main_stderr']:.4f} (range [-0.75, -0.25]); control "
           f"{sm['control_slope']:.4f} +- {sm['control_stderr']:.4f} (target {sm['target_slope']:g})", elapsed, 900)


@pytest.mark.slow
def test_14_uniform_in_time(chaos):
    res, _ = chaos
    r = res.summary["main_uniform_ratio"]
    report(14, res.checks["uniform_in_time"], f"sup over [T/2, T] / E_hat(t0) = {r:.4f} at N=1024 (max 2)")


# -- 15 -------------------------------------------------------------------------------------------

def test_15_reproducibility(tmp_path):
    t0 = time.perf_counter()
    studies = [
        StudyConfig(kind="chaos_scaling", N=[16, 32, 64], replicas=8, dt=0.02, t_end=0.5, grid=64,
                    calib_configs=20, record=dict(n_linear=2, n_geometric=3)),
        StudyConfig(kind="relaxation", d=1, s=0.5, N=[2, 4], grid=64, t_end=1.0),
    ]
    parts, ok = [], True
    for k, cfg in enumerate(studies):
        res = chaos_study(cfg) if cfg.kind == "chaos_scaling" else relaxation_study(cfg)
        write_study(res, cfg, tmp_path / f"a{k}")
        _, manifest, same = rerun_from_manifest(tmp_path / f"a{k}" / "manifest.json", tmp_path / f"b{k}")
        csvs = [f for f in manifest["files"] if f.endswith(".csv")]
        same = same and all((tmp_path / f"a{k}" / f).read_bytes() == (tmp_path / f"b{k}" / f).read_bytes()
                            for f in csvs)
        ok = ok and same and len(csvs) > 0
        parts.append(f"{cfg.kind}: {len(csvs)} CSVs {'identical' if same else 'DIFFER'}")
    report(15, ok, "; ".join(parts), time.perf_counter() - t0, 120)
