import json
import math

import numpy as np
import pytest

from rieszlab import FitError, ParameterError
from rieszlab.experiments import (StudyConfig, chaos_study, fi_sweep, fit_exp, fit_powerlaw, geometric_record_grid,
                                  load_config, relaxation_study, rerun_from_manifest, write_study)


def test_fit_powerlaw_exact():
    N = np.array([32, 64, 128, 256])
    slope, err = fit_powerlaw(np.column_stack([N, 3 * N**-0.5]))
    assert slope == pytest.approx(-0.5, abs=1e-12) and err < 1e-12


def test_fit_exp_exact():
    t = np.linspace(0, 2, 9)
    rate, err = fit_exp(np.column_stack([t, np.exp(-3 * t)]))
    assert rate == pytest.approx(3.0, abs=1e-12)


def test_fit_errors():
    with pytest.raises(FitError):
        fit_powerlaw([(1, 1.0), (2, 0.5)])
    with pytest.raises(FitError):
        fit_powerlaw([(1, 1.0), (2, -0.5), (4, 0.1)])


def test_noisy_powerlaw_recovered():
    rng = np.random.default_rng(0)
    N = np.geomspace(32, 4096, 8)
    hits = 0
    for _ in range(200):
        y = N**-0.5 * (1 + 0.1 * rng.standard_normal(N.size))
        slope, err = fit_powerlaw(np.column_stack([N, y]))
        hits += abs(slope + 0.5) <= 2 * err
    # about 95 % coverage for a two-stderr interval (t distribution with 6 dof: ~91 %)
    assert hits >= 170


def test_weighted_fit_uses_errors():
    N = np.array([128, 256, 512, 1024])
    y = N**-0.5
    slope, err = fit_powerlaw(np.column_stack([N, y]), errors=0.01 * y)
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert err == pytest.approx(0.01 / math.sqrt(np.sum((np.log(N) - np.log(N).mean()) ** 2)), rel=1e-9)


def test_record_grid():
    ts = geometric_record_grid(8.0, 4, 6)
    assert ts[0] == 0.0 and ts[-1] == pytest.approx(8.0)
    assert np.all(np.diff(ts) > 0)
    assert np.allclose(np.diff(ts[:5]), 0.0625)


def test_config_validation(tmp_path):
    with pytest.raises(ParameterError):
        StudyConfig(N=[256, 128])
    with pytest.raises(ParameterError):
        StudyConfig(replicas=4)
    with pytest.raises(ParameterError):
        StudyConfig(flow="conservative", d=2, s=0.0)
    with pytest.raises(ParameterError):
        StudyConfig.from_dict(dict(bogus=1))
    path = tmp_path / "c.toml"
    path.write_text('[study]\nkind = "relaxation"\nN = [2, 4]\nt_end = 0.5\n[study.thresholds]\nmin_rate = 1.0\n')
    cfg = load_config(path)
    assert cfg.kind == "relaxation" and cfg.thresholds == {"min_rate": 1.0}


def small_chaos(**kw):
    base = dict(N=[16, 32, 64], replicas=8, dt=0.02, t_end=0.5, grid=64, calib_configs=20,
                record=dict(n_linear=2, n_geometric=3))
    base.update(kw)
    return StudyConfig(**base)


def test_chaos_study_smoke():
    res = chaos_study(small_chaos())
    assert set(res.checks) == {"slope_in_range", "uniform_in_time", "control_slope"}
    header, rows = res.tables["main_N32"]
    assert header[0] == "t" and len(rows) == 6
    assert np.isfinite(res.summary["main_slope"])


def test_manifest_rerun_identical(tmp_path):
    cfg = small_chaos(N=[8, 16, 32], t_end=0.1, control=False)
    res = chaos_study(cfg)
    write_study(res, cfg, tmp_path / "a")
    _, manifest, same = rerun_from_manifest(tmp_path / "a" / "manifest.json", tmp_path / "b")
    assert same
    for name in manifest["files"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["config"]["N"] == [8, 16, 32]


def test_relaxation_study():
    cfg = StudyConfig(kind="relaxation", d=1, s=0.5, N=[2, 4], grid=64, pde_dt=1e-3, t_end=1.0)
    res = relaxation_study(cfg)
    assert res.passed
    assert res.summary["rate_free_energy"] > 0


def test_fi_sweep_smoke():
    cfg = StudyConfig(kind="fi_sweep", s=0.5, N=[16, 32, 64], configs=4, v_per_config=2, grid=32, calib_configs=10,
                      replicas=1)
    res = fi_sweep(cfg)
    header, rows = res.tables["fi_sweep"]
    assert header == ["N", "max_ratio", "median_ratio", "flags"]
    assert all(r[1] > 0 for r in rows[:-1])


def test_control_slope_stable_under_doubled_replicas():
    from rieszlab.experiments import _mu0, _run_branch, _study_table, calibrate

    slopes = {}
    for R in (8, 16):
        cfg = small_chaos(N=[32, 64, 128, 256], replicas=R, t_end=1.0)
        table = _study_table(cfg)
        C, _ = calibrate(cfg.params, _mu0(cfg), cfg.N[0], 20, cfg.seed, table, None, 2.0)
        _, slope, err, _ = _run_branch(cfg, table, cfg.record_times(), C, "control", False, lambda m: None)
        slopes[R] = (slope, err)
    assert abs(slopes[16][0] - slopes[8][0]) < slopes[8][1]
