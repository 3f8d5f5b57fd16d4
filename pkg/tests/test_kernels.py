"""Backend parity and selection for the convolution kernels."""

import os
import subprocess
import sys

import numpy as np
import pytest

from fbnet import kernels as K

SHAPES = [
    (2, 3, 8, 8, 4, 3, 1, 1, 1),
    (1, 2, 9, 7, 3, 3, 2, 1, 1),
    (2, 4, 12, 12, 5, 3, 1, 2, 2),
    (1, 1, 5, 5, 1, 1, 1, 1, 0),
    (2, 3, 10, 10, 4, 3, 2, 2, 2),
    (2, 3, 11, 13, 4, 5, 3, 2, 4),
    (1, 5, 6, 6, 2, 3, 1, 4, 4),
    (2, 6, 14, 10, 3, 2, 1, 3, 0),
]


def test_out_extent_formula():
    assert K.conv_out_extent(64, 3, 2, 1, 1) == 32
    assert K.conv_out_extent(8, 3, 1, 4, 4) == 8
    assert K.conv_out_extent(7, 3, 1, 2, 2) == 7
    assert K.conv_out_extent(5, 5, 1, 1, 0) == 1


@pytest.mark.parametrize("shape", SHAPES, ids=str)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(shape, dtype):
    b, cin, h, w, cout, k, s, d, p = shape
    rng = np.random.default_rng(hash(shape) % 2 ** 32)
    x = rng.normal(size=(b, cin, h, w)).astype(dtype)
    wt = rng.normal(size=(cout, cin, k, k)).astype(dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-10

    y_np = K.conv2d_forward_numpy(x, wt, s, d, p)
    y_nb = K.conv2d_forward_numba(x, wt, s, d, p)
    assert y_np.dtype == y_nb.dtype == dtype
    np.testing.assert_allclose(y_np, y_nb, atol=tol)

    gy = rng.normal(size=y_np.shape).astype(dtype)
    np.testing.assert_allclose(
        K.conv2d_backward_input_numpy(gy, wt, x.shape, s, d, p),
        K.conv2d_backward_input_numba(gy, wt, x.shape, s, d, p), atol=tol)
    np.testing.assert_allclose(
        K.conv2d_backward_weight_numpy(gy, x, wt.shape, s, d, p),
        K.conv2d_backward_weight_numba(gy, x, wt.shape, s, d, p), atol=tol)


def test_forward_matches_direct_definition(rng):
    """Both backends against a literal four-loop cross-correlation."""
    b, cin, h, w, cout, k, s, d, p = 1, 2, 6, 6, 3, 3, 1, 2, 2
    x = rng.normal(size=(b, cin, h, w))
    wt = rng.normal(size=(cout, cin, k, k))
    ho = K.conv_out_extent(h, k, s, d, p)
    wo = K.conv_out_extent(w, k, s, d, p)
    expected = np.zeros((b, cout, ho, wo))
    for co in range(cout):
        for oi in range(ho):
            for oj in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for i in range(k):
                        for j in range(k):
                            hi = oi * s - p + i * d
                            wi = oj * s - p + j * d
                            if 0 <= hi < h and 0 <= wi < w:
                                acc += x[0, ci, hi, wi] * wt[co, ci, i, j]
                expected[0, co, oi, oj] = acc
    np.testing.assert_allclose(K.conv2d_forward_numpy(x, wt, s, d, p), expected, atol=1e-12)
    np.testing.assert_allclose(K.conv2d_forward_numba(x, wt, s, d, p), expected, atol=1e-12)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_env_flag_selects_backend(backend):
    env = dict(os.environ, FBNET_BACKEND=backend)
    out = subprocess.run(
        [sys.executable, "-c", "import fbnet.kernels as K; print(K.ACTIVE_BACKEND)"],
        capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == backend


def test_env_flag_rejects_garbage():
    env = dict(os.environ, FBNET_BACKEND="cuda")
    out = subprocess.run(
        [sys.executable, "-c", "import fbnet.kernels"],
        capture_output=True, text=True, env=env)
    assert out.returncode != 0
    assert "FBNET_BACKEND" in out.stderr
