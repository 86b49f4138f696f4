"""Backend parity: the compiled kernels and the NumPy reference must agree."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from deskbert import kernels
from deskbert.kernels import reference

from conftest import rng

needs_cython = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                  reason="compiled extension not built")


def _random_packed(seed, dtype, heads=3, head_dim=8, lens=(5, 1, 9)):
    g = rng(seed)
    total = sum(lens)
    cu = np.zeros(len(lens) + 1, dtype=np.int64)
    np.cumsum(lens, out=cu[1:])
    q = g.standard_normal((total, heads, head_dim)).astype(dtype)
    k = g.standard_normal((total, heads, head_dim)).astype(dtype)
    v = g.standard_normal((total, heads, head_dim)).astype(dtype)
    return q, k, v, cu


@needs_cython
@pytest.mark.parametrize("half_window", [-1, 1, 2, 64])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
def test_forward_parity(dtype, tol, half_window):
    from deskbert.kernels import _attention
    for seed in range(5):
        q, k, v, cu = _random_packed(seed, dtype)
        scale = 1.0 / math.sqrt(q.shape[2])
        out_py, lse_py = reference.attend_fwd(q, k, v, cu, half_window, scale)
        out_cy, lse_cy = _attention.attend_fwd(q, k, v, cu, half_window, scale)
        npt.assert_allclose(out_cy, out_py, rtol=tol, atol=tol)
        npt.assert_allclose(lse_cy, lse_py, rtol=tol, atol=tol)


@needs_cython
@pytest.mark.parametrize("half_window", [-1, 2])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-4)])
def test_backward_parity(dtype, tol, half_window):
    from deskbert.kernels import _attention
    for seed in range(5):
        q, k, v, cu = _random_packed(seed, dtype)
        g = rng(1000 + seed).standard_normal(q.shape).astype(dtype)
        scale = 1.0 / math.sqrt(q.shape[2])
        out, lse = reference.attend_fwd(q, k, v, cu, half_window, scale)
        grads_py = reference.attend_bwd(q, k, v, out, g, lse, cu, half_window, scale)
        grads_cy = _attention.attend_bwd(q, k, v, out, g, lse, cu, half_window, scale)
        for a, b in zip(grads_cy, grads_py):
            npt.assert_allclose(a, b, rtol=tol, atol=tol)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_window_saturation_is_exact(backend):
    """half_window >= n - 1 must follow the same code path as global."""
    previous = kernels.use_backend(backend)
    try:
        q, k, v, cu = _random_packed(3, np.float64, lens=(7, 4))
        scale = 1.0 / math.sqrt(8)
        out_g, lse_g = kernels.attend_fwd(q, k, v, cu, -1, scale)
        out_w, lse_w = kernels.attend_fwd(q, k, v, cu, 6, scale)
        npt.assert_array_equal(out_w, out_g)
        npt.assert_array_equal(lse_w, lse_g)
    finally:
        kernels.use_backend(previous)


def test_use_backend_roundtrip():
    name = kernels.backend_name()
    other = [b for b in kernels.available_backends() if b != name]
    if other:
        kernels.use_backend(other[0])
        assert kernels.backend_name() == other[0]
        kernels.use_backend(name)
    assert kernels.backend_name() == name


def test_unknown_backend():
    with pytest.raises(ImportError):
        kernels.use_backend("fortran")
