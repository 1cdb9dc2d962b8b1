import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalevec import _fallback, kernels
from scalevec.verify import brute_maxpool, brute_resize

HAVE_EXT = "cython" in kernels.BACKENDS
needs_ext = pytest.mark.skipif(not HAVE_EXT, reason="compiled extension not built")


def test_env_var_forces_numpy_backend():
    env = dict(os.environ, SCALEVEC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import scalevec; print(scalevec.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_use_rejects_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use("fortran")


@needs_ext
def test_compiled_backend_preferred():
    env = {k: v for k, v in os.environ.items() if k != "SCALEVEC_PURE_PYTHON"}
    out = subprocess.run([sys.executable, "-c", "import scalevec; print(scalevec.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "cython"


shapes = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 9), st.integers(1, 9))


@needs_ext
@settings(max_examples=40, deadline=None)
@given(shape=shapes, k=st.sampled_from([1, 3, 5]), pad=st.integers(0, 2), seed=st.integers(0, 2**31))
def test_im2col_col2im_parity(shape, k, pad, seed):
    n, c, h, w = shape
    if h + 2 * pad < k or w + 2 * pad < k:
        return
    x = np.random.default_rng(seed).standard_normal(shape)
    ext = kernels.BACKENDS["cython"]
    cols = _fallback.im2col(x, k, pad)
    np.testing.assert_array_equal(ext.im2col(x, k, pad), cols)
    np.testing.assert_array_equal(ext.col2im(cols, n, c, h, w, k, pad), _fallback.col2im(cols, n, c, h, w, k, pad))


def test_col2im_is_adjoint_of_im2col(backend, rng):
    x = rng.standard_normal((2, 3, 7, 6))
    cols = kernels.im2col(x, 3, 1)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * kernels.col2im(y, 2, 3, 7, 6, 3, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), oh=st.integers(1, 15), ow=st.integers(1, 15),
       seed=st.integers(0, 2**31))
def test_resize_matches_pixel_formula(h, w, oh, ow, seed):
    plane = np.random.default_rng(seed).standard_normal((h, w))
    for name, impl in kernels.BACKENDS.items():
        got = impl.resize(plane[None].copy(), oh, ow)[0]
        np.testing.assert_allclose(got, brute_resize(plane, oh, ow), rtol=0, atol=1e-12, err_msg=name)


def test_resize_backward_is_adjoint(backend, rng):
    x = rng.standard_normal((3, 9, 7))
    g = rng.standard_normal((3, 12, 5))
    lhs = np.sum(kernels.resize(x, 12, 5) * g)
    rhs = np.sum(x * kernels.resize_backward(g, 9, 7))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_pool_matches_exhaustive_scan(backend, rng, dtype):
    for h, w in [(4, 4), (5, 7), (1, 1), (3, 2)]:
        x = rng.standard_normal((2, h, w)).astype(dtype)
        vals, idx = kernels.pool2x2(x)
        for b in range(2):
            ev, ei = brute_maxpool(x[b])
            np.testing.assert_array_equal(vals[b], ev)
            np.testing.assert_array_equal(idx[b], ei)


def test_pool_tie_goes_to_first(backend):
    x = np.ones((1, 2, 2))
    _, idx = kernels.pool2x2(x)
    assert idx[0, 0, 0] == 0


def test_unpool_routes_to_argmax(backend, rng):
    x = rng.standard_normal((2, 5, 4))
    _, idx = kernels.pool2x2(x)
    g = rng.standard_normal((2, 3, 2))
    out = kernels.unpool2x2(g, idx, 5, 4)
    assert out.shape == (2, 5, 4)
    np.testing.assert_array_equal(np.take_along_axis(out.reshape(2, -1), idx.reshape(2, -1), 1), g.reshape(2, -1))
    assert np.count_nonzero(out) == g.size


def test_scale_argmax_first_index_on_ties(backend):
    stack = np.array([[1.0, 2.0, 0.0], [1.0, 3.0, 0.0], [0.5, 3.0, 0.0]])
    vals, idx = kernels.scale_argmax(stack)
    np.testing.assert_array_equal(vals, [1.0, 3.0, 0.0])
    np.testing.assert_array_equal(idx, [0, 1, 0])


@needs_ext
def test_backends_agree_on_float32(rng):
    ext = kernels.BACKENDS["cython"]
    x = rng.standard_normal((4, 11, 13)).astype(np.float32)
    np.testing.assert_allclose(ext.resize(x, 17, 9), _fallback.resize(x, 17, 9), rtol=1e-5, atol=1e-6)
    v1, i1 = ext.pool2x2(x)
    v2, i2 = _fallback.pool2x2(x)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_array_equal(i1, i2)
    s = rng.standard_normal((8, 100)).astype(np.float32)
    np.testing.assert_array_equal(ext.scale_argmax(s)[1], _fallback.scale_argmax(s)[1])
