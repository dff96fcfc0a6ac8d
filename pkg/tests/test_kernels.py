import os
import subprocess
import sys

import numpy as np
import pytest

from rieszlab import kernels
from rieszlab._accel import HAVE_NUMBA

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")

CASES = [(1, 0.0), (1, 0.5), (1, -0.5), (2, 0.0), (2, 1.5)]


@pytest.mark.parametrize("d,s", CASES)
def test_numba_matches_numpy(table_factory, d, s):
    tab = table_factory(d, s)
    args = tab.kernel_args
    rng = np.random.default_rng(d * 10 + int(10 * s))
    x = rng.uniform(-0.5, 0.5, (150, d))
    nb, npk = kernels.NUMBA_KERNELS, kernels.NUMPY_KERNELS
    for eps in (0.0, 0.02):
        a, b = nb["forces"](x, *args, eps), npk["forces"](x, *args, eps)
        assert np.allclose(np.asarray(a).reshape(b.shape), b, rtol=1e-11, atol=1e-11 * np.abs(b).max())
    assert nb["energy"](x, *args) == pytest.approx(npk["energy"](x, *args), rel=1e-12)
    eta = rng.uniform(0.01, 0.1, 150)
    assert nb["energy_trunc"](x, eta, *args) == pytest.approx(npk["energy_trunc"](x, eta, *args), rel=1e-12)
    v = rng.normal(size=(150, d)) if d > 1 else rng.normal(size=150)
    assert nb["transport"](x, v, *args) == pytest.approx(npk["transport"](x, v, *args), rel=1e-10)
    pts = rng.uniform(-0.5, 0.5, (40, d))
    for singular in (0, 1, 2):
        ga, da = nb["eval_points"](pts, *args, 0.05, singular)
        gb, db = npk["eval_points"](pts, *args, 0.05, singular)
        assert np.allclose(ga, gb, atol=1e-12) and np.allclose(da, db, atol=1e-10)


def test_coincident_energy_is_nan(log_table):
    x = np.array([[0.1], [0.1]])
    assert np.isnan(kernels.NUMBA_KERNELS["energy"](x, *log_table.kernel_args))
    assert np.isnan(kernels.NUMPY_KERNELS["energy"](x, *log_table.kernel_args))


def test_env_flag_selects_numpy():
    code = "import rieszlab.kernels as k, rieszlab._accel as a; print(a.USE_NUMBA, k.KERNELS is k.NUMPY_KERNELS)"
    env = dict(os.environ, RIESZLAB_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]
