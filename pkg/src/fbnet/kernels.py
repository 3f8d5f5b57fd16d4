"""Hot convolution kernels: numba fast path plus a pure-numpy fallback.

The 2D cross-correlation (forward, input-gradient, weight-gradient) dominates
training time, so it gets two interchangeable implementations:

* ``*_numba`` -- explicit loops under ``@njit(parallel=True)``.  The input is
  padded up front so the inner loops carry no bounds checks and vectorize;
  writes are disjoint across threads, so results are bit-deterministic for any
  thread count.
* ``*_numpy`` -- im2col / col2im, fully vectorized.

``FBNET_BACKEND=numba|numpy`` selects the active path at import time (numba by
default when importable).  ``FBNET_THREADS`` caps numba's worker threads.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

# environment noise when numba probes an outdated TBB install; it falls back
# to another threading layer on its own
warnings.filterwarnings("ignore", message="The TBB threading layer requires TBB version")

try:
    import numba
    from numba import njit, prange

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def thread_cap() -> int | None:
    raw = os.environ.get("FBNET_THREADS", "").strip()
    if not raw:
        return None
    try:
        return max(1, int(raw))
    except ValueError:
        return None


if _HAVE_NUMBA:
    cap = thread_cap()
    if cap is not None:
        numba.set_num_threads(min(cap, numba.config.NUMBA_NUM_THREADS))

_env = os.environ.get("FBNET_BACKEND", "").strip().lower()
if _env in ("numba", "numpy"):
    ACTIVE_BACKEND = _env if (_env == "numpy" or _HAVE_NUMBA) else "numpy"
elif _env:
    raise ValueError(f"FBNET_BACKEND must be 'numba' or 'numpy', got {_env!r}")
else:
    ACTIVE_BACKEND = "numba" if _HAVE_NUMBA else "numpy"


def conv_out_extent(extent: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (extent + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


# ---------------------------------------------------------------------------
# numpy path (im2col / col2im)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            padding: int) -> np.ndarray:
    """(B,Cin,H,W) -> (B, Cin*kh*kw, Ho*Wo) patch matrix."""
    b, cin, h, w = x.shape
    ho = conv_out_extent(h, kh, stride, dilation, padding)
    wo = conv_out_extent(w, kw, stride, dilation, padding)
    xp = _pad_spatial(x, padding)
    # rows[i, p] = input row of kernel tap i at output row p
    rows = dilation * np.arange(kh)[:, None] + stride * np.arange(ho)[None, :]
    cols = dilation * np.arange(kw)[:, None] + stride * np.arange(wo)[None, :]
    col = xp[:, :, rows[:, None, :, None], cols[None, :, None, :]]
    return col.reshape(b, cin * kh * kw, ho * wo)


def conv2d_forward_numpy(x: np.ndarray, w: np.ndarray, stride: int, dilation: int,
                         padding: int) -> np.ndarray:
    b = x.shape[0]
    cout, cin, kh, kw = w.shape
    ho = conv_out_extent(x.shape[2], kh, stride, dilation, padding)
    wo = conv_out_extent(x.shape[3], kw, stride, dilation, padding)
    col = _im2col(x, kh, kw, stride, dilation, padding)
    y = np.einsum("of,bfn->bon", w.reshape(cout, -1), col, optimize=True)
    return np.ascontiguousarray(y.reshape(b, cout, ho, wo))


def conv2d_backward_input_numpy(grad_y: np.ndarray, w: np.ndarray, x_shape: tuple,
                                stride: int, dilation: int, padding: int) -> np.ndarray:
    b, cin, h, ww = x_shape
    cout, _, kh, kw = w.shape
    _, _, ho, wo = grad_y.shape
    gy = grad_y.reshape(b, cout, ho * wo)
    gcol = np.einsum("of,bon->bfn", w.reshape(cout, -1), gy, optimize=True)
    gcol = gcol.reshape(b, cin, kh, kw, ho, wo)
    gx = np.zeros((b, cin, h + 2 * padding, ww + 2 * padding), dtype=grad_y.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i * dilation:i * dilation + stride * ho:stride,
               j * dilation:j * dilation + stride * wo:stride] += gcol[:, :, i, j]
    if padding > 0:
        gx = gx[:, :, padding:padding + h, padding:padding + ww]
    return np.ascontiguousarray(gx)


def conv2d_backward_weight_numpy(grad_y: np.ndarray, x: np.ndarray, w_shape: tuple,
                                 stride: int, dilation: int, padding: int) -> np.ndarray:
    cout, cin, kh, kw = w_shape
    b, _, ho, wo = grad_y.shape
    col = _im2col(x, kh, kw, stride, dilation, padding)
    gy = grad_y.reshape(b, cout, ho * wo)
    gw = np.einsum("bon,bfn->of", gy, col, optimize=True)
    return np.ascontiguousarray(gw.reshape(cout, cin, kh, kw))


# ---------------------------------------------------------------------------
# numba path
#
# Kernels run channels-last so the innermost loop is a long contiguous dot or
# axpy over input channels; the thin wrappers transpose at the boundary (cheap
# next to the O(C^2 k^2 HW) loop body).
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(parallel=True, nogil=True, cache=True, fastmath=True)
    def _conv2d_forward_nb(xp, w, stride, dilation, y):
        # xp: B,Hp,Wp,Cin; w: Cout,kh,kw,Cin; y: B,Ho,Wo,Cout
        b, ho, wo, cout = y.shape
        kh, kw, cin = w.shape[1], w.shape[2], w.shape[3]
        for p in prange(b * cout):
            bi = p // cout
            co = p % cout
            for oi in range(ho):
                for oj in range(wo):
                    acc = y[bi, oi, oj, co]
                    for i in range(kh):
                        for j in range(kw):
                            xr = xp[bi, oi * stride + i * dilation, oj * stride + j * dilation]
                            wr = w[co, i, j]
                            for ci in range(cin):
                                acc += wr[ci] * xr[ci]
                    y[bi, oi, oj, co] = acc
        return y

    @njit(parallel=True, nogil=True, cache=True, fastmath=True)
    def _conv2d_backward_input_scatter_nb(gy, w, stride, dilation, gxp):
        # strided case; only the batch axis partitions the writes
        b, ho, wo, cout = gy.shape
        kh, kw, cin = w.shape[1], w.shape[2], w.shape[3]
        for bi in prange(b):
            for oi in range(ho):
                for oj in range(wo):
                    gr = gy[bi, oi, oj]
                    for co in range(cout):
                        g = gr[co]
                        for i in range(kh):
                            for j in range(kw):
                                gxr = gxp[bi, oi * stride + i * dilation, oj * stride + j * dilation]
                                wr = w[co, i, j]
                                for ci in range(cin):
                                    gxr[ci] += g * wr[ci]
        return gxp

    @njit(parallel=True, nogil=True, cache=True, fastmath=True)
    def _conv2d_backward_input_gather_nb(gy, wg, dilation, padding, h, w_in, gxp):
        # stride-1 case: every interior input position gathers its own gradient,
        # a contiguous dot over output channels (wg layout: kh,kw,Cin,Cout)
        b, ho, wo, cout = gy.shape
        kh, kw, cin = wg.shape[0], wg.shape[1], wg.shape[2]
        for p in prange(b * h):
            bi = p // h
            hi = padding + p % h
            for wi in range(padding, padding + w_in):
                gxr = gxp[bi, hi, wi]
                for i in range(kh):
                    oi = hi - i * dilation
                    if oi < 0 or oi >= ho:
                        continue
                    for j in range(kw):
                        oj = wi - j * dilation
                        if oj < 0 or oj >= wo:
                            continue
                        gr = gy[bi, oi, oj]
                        wr2 = wg[i, j]
                        for ci in range(cin):
                            acc = gxr[ci]
                            wrow = wr2[ci]
                            for co in range(cout):
                                acc += gr[co] * wrow[co]
                            gxr[ci] = acc
        return gxp

    @njit(parallel=True, nogil=True, cache=True, fastmath=True)
    def _conv2d_backward_weight_nb(gy, xp, stride, dilation, gw):
        # gw: Cout,kh,kw,Cin; each thread owns one output channel
        b, ho, wo, cout = gy.shape
        kh, kw, cin = gw.shape[1], gw.shape[2], gw.shape[3]
        for co in prange(cout):
            for bi in range(b):
                for oi in range(ho):
                    for oj in range(wo):
                        g = gy[bi, oi, oj, co]
                        for i in range(kh):
                            for j in range(kw):
                                xr = xp[bi, oi * stride + i * dilation, oj * stride + j * dilation]
                                gwr = gw[co, i, j]
                                for ci in range(cin):
                                    gwr[ci] += g * xr[ci]
        return gw

    def _to_cl(x: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))

    def conv2d_forward_numba(x, w, stride, dilation, padding):
        ho = conv_out_extent(x.shape[2], w.shape[2], stride, dilation, padding)
        wo = conv_out_extent(x.shape[3], w.shape[3], stride, dilation, padding)
        y = np.zeros((x.shape[0], ho, wo, w.shape[0]), dtype=x.dtype)
        xp = _to_cl(_pad_spatial(x, padding))
        wl = np.ascontiguousarray(w.transpose(0, 2, 3, 1))
        _conv2d_forward_nb(xp, wl, stride, dilation, y)
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def conv2d_backward_input_numba(grad_y, w, x_shape, stride, dilation, padding):
        b, cin, h, ww = x_shape
        gxp = np.zeros((b, h + 2 * padding, ww + 2 * padding, cin), dtype=grad_y.dtype)
        if stride == 1:
            wg = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
            _conv2d_backward_input_gather_nb(_to_cl(grad_y), wg, dilation, padding, h, ww, gxp)
        else:
            wl = np.ascontiguousarray(w.transpose(0, 2, 3, 1))
            _conv2d_backward_input_scatter_nb(_to_cl(grad_y), wl, stride, dilation, gxp)
        gx = gxp.transpose(0, 3, 1, 2)
        if padding > 0:
            gx = gx[:, :, padding:padding + h, padding:padding + ww]
        return np.ascontiguousarray(gx)

    def conv2d_backward_weight_numba(grad_y, x, w_shape, stride, dilation, padding):
        cout, cin, kh, kw = w_shape
        gw = np.zeros((cout, kh, kw, cin), dtype=grad_y.dtype)
        _conv2d_backward_weight_nb(_to_cl(grad_y), _to_cl(_pad_spatial(x, padding)),
                                   stride, dilation, gw)
        return np.ascontiguousarray(gw.transpose(0, 3, 1, 2))


if ACTIVE_BACKEND == "numba":
    conv2d_forward = conv2d_forward_numba
    conv2d_backward_input = conv2d_backward_input_numba
    conv2d_backward_weight = conv2d_backward_weight_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_input = conv2d_backward_input_numpy
    conv2d_backward_weight = conv2d_backward_weight_numpy
