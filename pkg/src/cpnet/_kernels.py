"""Low-level convolution, pooling and scatter kernels.

Two execution paths share one contract:

* float32 arrays run through im2col + BLAS matmul (fast, used for
  training and inference),
* float64 arrays run through compiled direct loops whose per-element
  accumulation order is fixed at (channel, kernel-row, kernel-col), so
  results are reproducible down to the last bit and can be compared
  against scalar reference loops (the verification mode).

Both paths are deterministic for a fixed input; the loop kernels are
deterministic for any thread count because each output element is
reduced sequentially by a single thread.
"""

from __future__ import annotations

import ctypes
import os
import threading

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import numpy as np
from numba import njit, prange, set_num_threads

try:
    # keep large blocks on the heap so freed activation buffers are reused
    # instead of being returned to the OS and page-faulted back in
    ctypes.CDLL("libc.so.6").mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
except OSError:  # pragma: no cover - non-glibc platforms
    pass


def configure_threads(n: int | None = None) -> None:
    """Cap internal worker threads (defaults to the CPNET_THREADS env var)."""
    if n is None:
        env = os.environ.get("CPNET_THREADS", "").strip()
        if not env:
            return
        n = int(env)
    set_num_threads(max(1, n))


# ---------------------------------------------------------------------------
# direct-loop kernels (float64 verification path; any stride/kernel)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv2d_loop(x, w, b, stride, pad):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    out = np.empty((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                row = out[ni, co, oi]
                for oj in range(ow):
                    row[oj] = b[co]
                i0 = oi * stride - pad
                for ci in range(cin):
                    for ki in range(kh):
                        ii = i0 + ki
                        if ii < 0 or ii >= h:
                            continue
                        xr = x[ni, ci, ii]
                        for kj in range(kw):
                            wv = w[co, ci, ki, kj]
                            lo = -(-(pad - kj) // stride)
                            if lo < 0:
                                lo = 0
                            hi = (wid - 1 + pad - kj) // stride + 1
                            if hi > ow:
                                hi = ow
                            for oj in range(lo, hi):
                                row[oj] += xr[oj * stride - pad + kj] * wv
    return out


@njit(cache=True)
def _conv2d_loop_dx(g, w, stride, pad, h, wid):
    n, cout, oh, ow = g.shape
    _, cin, kh, kw = w.shape
    dx = np.zeros((n, cin, h, wid), dtype=g.dtype)
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    gv = g[ni, co, oi, oj]
                    i0 = oi * stride - pad
                    j0 = oj * stride - pad
                    for ci in range(cin):
                        for ki in range(kh):
                            ii = i0 + ki
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(kw):
                                jj = j0 + kj
                                if jj < 0 or jj >= wid:
                                    continue
                                dx[ni, ci, ii, jj] += gv * w[co, ci, ki, kj]
    return dx


@njit(cache=True)
def _conv2d_loop_dw(g, x, kh, kw, stride, pad):
    n, cout, oh, ow = g.shape
    _, cin, h, wid = x.shape
    dw = np.zeros((cout, cin, kh, kw), dtype=g.dtype)
    db = np.zeros(cout, dtype=g.dtype)
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    gv = g[ni, co, oi, oj]
                    db[co] += gv
                    i0 = oi * stride - pad
                    j0 = oj * stride - pad
                    for ci in range(cin):
                        for ki in range(kh):
                            ii = i0 + ki
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(kw):
                                jj = j0 + kj
                                if jj < 0 or jj >= wid:
                                    continue
                                dw[co, ci, ki, kj] += gv * x[ni, ci, ii, jj]
    return dw, db


@njit(cache=True)
def _convt2d_loop(x, w, b, stride):
    # gather form; per output element the reduction runs over
    # (ci, input-row, input-col) ascending, matching a scatter-add oracle
    n, cin, h, wid = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride + kh
    ow = (wid - 1) * stride + kw
    out = np.empty((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = b[co]
                    for ci in range(cin):
                        ilo = -(-(oi - kh + 1) // stride)
                        if ilo < 0:
                            ilo = 0
                        ihi = oi // stride
                        if ihi > h - 1:
                            ihi = h - 1
                        for i in range(ilo, ihi + 1):
                            ki = oi - i * stride
                            jlo = -(-(oj - kw + 1) // stride)
                            if jlo < 0:
                                jlo = 0
                            jhi = oj // stride
                            if jhi > wid - 1:
                                jhi = wid - 1
                            for j in range(jlo, jhi + 1):
                                kj = oj - j * stride
                                acc += x[ni, ci, i, j] * w[ci, co, ki, kj]
                    out[ni, co, oi, oj] = acc
    return out


@njit(cache=True)
def _convt2d_loop_dx(g, w, stride):
    n, cout, oh, ow = g.shape
    cin, _, kh, kw = w.shape
    h = (oh - kh) // stride + 1
    wid = (ow - kw) // stride + 1
    dx = np.zeros((n, cin, h, wid), dtype=g.dtype)
    for ni in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wid):
                    acc = dx[ni, ci, i, j]
                    for co in range(cout):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += g[ni, co, i * stride + ki, j * stride + kj] * w[ci, co, ki, kj]
                    dx[ni, ci, i, j] = acc
    return dx


@njit(cache=True)
def _convt2d_loop_dw(g, x, kh, kw, stride):
    n, cout, oh, ow = g.shape
    _, cin, h, wid = x.shape
    dw = np.zeros((cin, cout, kh, kw), dtype=g.dtype)
    db = np.zeros(cout, dtype=g.dtype)
    for ni in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wid):
                    xv = x[ni, ci, i, j]
                    for co in range(cout):
                        for ki in range(kh):
                            for kj in range(kw):
                                dw[ci, co, ki, kj] += xv * g[ni, co, i * stride + ki, j * stride + kj]
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    db[co] += g[ni, co, oi, oj]
    return dw, db


# ---------------------------------------------------------------------------
# pooling (both precisions)
# ---------------------------------------------------------------------------

def _maxpool2_fwd(x):
    n, c, h, wid = x.shape
    oh, ow = h // 2, wid // 2
    # candidates ordered row-major within each window, so argmax ties pick
    # the first position
    win = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _maxpool2_bwd(g, idx):
    n, c, oh, ow = g.shape
    scatter = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
    np.put_along_axis(scatter, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    return np.ascontiguousarray(
        scatter.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow))


# ---------------------------------------------------------------------------
# im2col / col2im for the float32 BLAS path (channels-first layout:
# patch matrices are (N, C*KH*KW, OH*OW) so batched matmul against the
# (C_out, C*KH*KW) weight matrix needs no transposed copies)
# ---------------------------------------------------------------------------

_scratch = threading.local()


def _scratch_buffer(shape, dtype):
    """Reusable per-thread buffer for ephemeral patch matrices; callers
    must fully consume the result before the next same-shape request."""
    buffers = getattr(_scratch, "buffers", None)
    if buffers is None:
        buffers = _scratch.buffers = {}
    key = (shape, np.dtype(dtype).str)
    buf = buffers.get(key)
    if buf is None:
        buf = buffers[key] = np.empty(shape, dtype)
    return buf


@njit(parallel=True, cache=True)
def _im2col_cf(x, kh, kw, stride, pad, oh, ow, cols):
    n, c, h, wid = x.shape
    for p in prange(n * c):
        ni = p // c
        ci = p % c
        for ki in range(kh):
            for kj in range(kw):
                r = (ci * kh + ki) * kw + kj
                # valid output columns: 0 <= oj*stride - pad + kj < wid
                lo = -(-(pad - kj) // stride)
                if lo < 0:
                    lo = 0
                hi = (wid - 1 + pad - kj) // stride + 1
                if hi > ow:
                    hi = ow
                j0 = lo * stride - pad + kj
                for oi in range(oh):
                    ii = oi * stride - pad + ki
                    base = oi * ow
                    if ii < 0 or ii >= h:
                        cols[ni, r, base : base + ow] = 0.0
                        continue
                    if lo > 0:
                        cols[ni, r, base : base + lo] = 0.0
                    if hi < ow:
                        cols[ni, r, base + hi : base + ow] = 0.0
                    cols[ni, r, base + lo : base + hi] = \
                        x[ni, ci, ii, j0 : j0 + (hi - lo) * stride : stride]
    return cols


def _patches(x, kh, kw, stride, pad, oh, ow):
    n, c = x.shape[:2]
    cols = _scratch_buffer((n, c * kh * kw, oh * ow), x.dtype)
    return _im2col_cf(x, kh, kw, stride, pad, oh, ow, cols)


@njit(parallel=True, cache=True)
def _col2im_cf(cols, c, kh, kw, stride, pad, h, wid, oh, ow):
    n = cols.shape[0]
    out = np.zeros((n, c, h, wid), dtype=cols.dtype)
    for p in prange(n * c):
        ni = p // c
        ci = p % c
        for ki in range(kh):
            for kj in range(kw):
                r = (ci * kh + ki) * kw + kj
                for oi in range(oh):
                    ii = oi * stride - pad + ki
                    if ii < 0 or ii >= h:
                        continue
                    base = oi * ow
                    for oj in range(ow):
                        jj = oj * stride - pad + kj
                        if 0 <= jj < wid:
                            out[ni, ci, ii, jj] += cols[ni, r, base + oj]
    return out


def _conv2d_gemm(x, w, b, stride, pad):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    cols = _patches(x, kh, kw, stride, pad, oh, ow)
    out = np.matmul(w.reshape(cout, cin * kh * kw)[None], cols).reshape(n, cout, oh, ow)
    out += b.reshape(1, cout, 1, 1)
    return out


def _conv2d_gemm_bwd(g, x, w, stride, pad):
    n, cout, oh, ow = g.shape
    _, cin, h, wid = x.shape
    kh, kw = w.shape[2:]
    w_r = w.reshape(cout, cin * kh * kw)
    g_r = g.reshape(n, cout, oh * ow)
    cols = _patches(x, kh, kw, stride, pad, oh, ow)
    dw = np.matmul(g_r, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = g.sum(axis=(0, 2, 3))
    if stride == 1 and pad <= kh - 1:
        # gradient w.r.t. the input of a stride-1 correlation is another
        # stride-1 correlation with channel-swapped, spatially flipped weights
        w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dx = _conv2d_gemm(g, w_flip, np.zeros(cin, dtype=g.dtype), 1, kh - 1 - pad)
    else:
        dcols = np.matmul(w_r.T[None], g_r)
        dx = _col2im_cf(dcols, cin, kh, kw, stride, pad, h, wid, oh, ow)
    return dx, dw, db


def _convt2d_gemm(x, w, b, stride):
    n, cin, h, wid = x.shape
    _, cout, kh, kw = w.shape
    oh = (h - 1) * stride + kh
    ow = (wid - 1) * stride + kw
    w_r = w.reshape(cin, cout * kh * kw)
    cols = np.matmul(w_r.T[None], x.reshape(n, cin, h * wid),
                     out=_scratch_buffer((n, cout * kh * kw, h * wid), x.dtype))
    out = _col2im_cf(cols, cout, kh, kw, stride, 0, oh, ow, h, wid)
    out += b.reshape(1, cout, 1, 1)
    return out


def _convt2d_gemm_bwd(g, x, w, stride):
    n, cin, h, wid = x.shape
    _, cout, kh, kw = w.shape
    gcols = _patches(g, kh, kw, stride, 0, h, wid)    # (N, Cout*KH*KW, H*W)
    w_r = w.reshape(cin, cout * kh * kw)
    dx = np.matmul(w_r[None], gcols).reshape(n, cin, h, wid)
    dw = np.matmul(x.reshape(n, cin, h * wid), gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = g.sum(axis=(0, 2, 3))
    return dx, dw, db


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b, stride, padding):
    if x.dtype == np.float32:
        return _conv2d_gemm(x, w, b, stride, padding)
    return _conv2d_loop(x, w, b, stride, padding)


def conv2d_backward(g, x, w, stride, padding):
    if g.dtype == np.float32:
        return _conv2d_gemm_bwd(g, x, w, stride, padding)
    dx = _conv2d_loop_dx(g, w, stride, padding, x.shape[2], x.shape[3])
    dw, db = _conv2d_loop_dw(g, x, w.shape[2], w.shape[3], stride, padding)
    return dx, dw, db


def conv_transpose2d_forward(x, w, b, stride):
    if x.dtype == np.float32:
        return _convt2d_gemm(x, w, b, stride)
    return _convt2d_loop(x, w, b, stride)


def conv_transpose2d_backward(g, x, w, stride):
    if g.dtype == np.float32:
        return _convt2d_gemm_bwd(g, x, w, stride)
    dx = _convt2d_loop_dx(g, w, stride)
    dw, db = _convt2d_loop_dw(g, x, w.shape[2], w.shape[3], stride)
    return dx, dw, db


def maxpool2_forward(x):
    return _maxpool2_fwd(x)


def maxpool2_backward(g, idx):
    return _maxpool2_bwd(g, idx)


configure_threads()
