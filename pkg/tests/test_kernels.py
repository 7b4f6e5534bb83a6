import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmswinkan import kernels
from cmswinkan.kan import SplineGrid
from oracles import cox_de_boor


@pytest.fixture
def both_backends():
    prev = kernels.backend()
    yield
    kernels.set_backend(prev)


def _run(backend, fn, *args):
    kernels.set_backend(backend)
    return fn(*args)


@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_bspline_backends_agree(both_backends, k):
    g = SplineGrid.uniform(6, k)
    x = np.random.default_rng(k).uniform(-1.3, 1.3, 2000)
    a, da = _run("numba", kernels.bspline_basis, x, g.knots, k, g.lo, g.hi)
    b, db = _run("numpy", kernels.bspline_basis, x, g.knots, k, g.lo, g.hi)
    np.testing.assert_allclose(a, b, atol=1e-14)
    np.testing.assert_allclose(da, db, atol=1e-12)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_bspline_matches_textbook_recursion(both_backends, backend):
    knots = np.array([-2.0, -1.3, -1.0, -0.2, 0.1, 0.5, 1.0, 1.4, 2.2])
    k = 2
    x = np.random.default_rng(3).uniform(-1.0, 1.0, 200)
    vals, _ = _run(backend, kernels.bspline_basis, x, knots, k, -1.0, 1.0)
    ref = np.array([[cox_de_boor(i, k, knots, xv) for i in range(len(knots) - k - 1)] for xv in x])
    np.testing.assert_allclose(vals, ref, atol=1e-13)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
@pytest.mark.parametrize("k", [1, 2, 3])
def test_bspline_derivative_matches_finite_differences(both_backends, backend, k):
    g = SplineGrid.uniform(5, k)
    x = np.random.default_rng(k).uniform(-0.98, 0.98, 300)
    h = 1e-6
    _, d = _run(backend, kernels.bspline_basis, x, g.knots, k, g.lo, g.hi)
    fp, _ = kernels.bspline_basis(x + h, g.knots, k, g.lo, g.hi)
    fm, _ = kernels.bspline_basis(x - h, g.knots, k, g.lo, g.hi)
    np.testing.assert_allclose(d, (fp - fm) / (2 * h), atol=2e-6)


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_clamped_inputs_have_zero_derivative(both_backends, backend):
    g = SplineGrid.uniform()
    x = np.array([-5.0, -1.0001, 1.0001, 7.0])
    vals, d = _run(backend, kernels.bspline_basis, x, g.knots, g.k, g.lo, g.hi)
    edge, _ = kernels.bspline_basis(np.array([-1.0, -1.0, 1.0, 1.0]), g.knots, g.k, g.lo, g.hi)
    np.testing.assert_allclose(vals, edge, atol=1e-15)
    assert np.all(d == 0.0)


@given(st.sampled_from([1, 3, 5]), st.integers(1, 2), st.integers(0, 2), st.integers(0, 2**31))
def test_unfold_fold_backends_agree(k, stride, pad, seed):
    size = 7
    if (size + 2 * pad - k) % stride or size + 2 * pad < k:
        return
    prev = kernels.backend()
    try:
        x = np.random.default_rng(seed).normal(size=(2, 3, size, size))
        u1 = _run("numba", kernels.unfold, x, k, stride, pad)
        u2 = _run("numpy", kernels.unfold, x, k, stride, pad)
        np.testing.assert_array_equal(u1, u2)
        f1 = _run("numba", kernels.fold, u1, size, size, k, stride, pad)
        f2 = _run("numpy", kernels.fold, u1, size, size, k, stride, pad)
        np.testing.assert_allclose(f1, f2, atol=1e-13)
    finally:
        kernels.set_backend(prev)


def test_unfold_layout():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    u = kernels.unfold(x, 3, 1, 1)
    assert u.shape == (1, 1, 3, 3, 4, 4)
    # centre tap reproduces the input, top-left tap at (0,0) reads padding
    np.testing.assert_array_equal(u[0, 0, 1, 1], x[0, 0])
    assert u[0, 0, 0, 0, 0, 0] == 0.0 and u[0, 0, 0, 0, 1, 1] == x[0, 0, 0, 0]


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, CMSWINKAN_PURE_NUMPY="1")
    out = subprocess.run([sys.executable, "-c", "from cmswinkan import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
