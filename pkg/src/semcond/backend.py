"""Convolution patch kernels: numba-jitted hot loops with a numpy fallback.

Patch matrices use the [B, C*KH*KW, OH*OW] layout: the kernel inner loops
then run over contiguous output rows, and the convolution GEMM
(weights [O, C*KH*KW] @ cols) lands directly in [B, O, OH, OW] order with
no transpose.

The active implementation is chosen once at import from the SEMCOND_BACKEND
environment variable: "numba" (require numba), "numpy" (force fallback), or
"auto" (numba when importable, the default). `use_backend` switches at
runtime for tests and benchmarks.
"""

import os
from contextlib import contextmanager

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _resolve(flag: str) -> str:
    flag = (flag or "auto").lower()
    if flag not in ("auto", "numba", "numpy"):
        raise ValueError(f"SEMCOND_BACKEND must be auto|numba|numpy, got {flag!r}")
    if flag == "numba" and not HAS_NUMBA:
        raise RuntimeError("SEMCOND_BACKEND=numba but numba is not importable")
    if flag == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    return flag


_BACKEND = _resolve(os.environ.get("SEMCOND_BACKEND", "auto"))


def active_backend() -> str:
    return _BACKEND


@contextmanager
def use_backend(name: str):
    global _BACKEND
    prev = _BACKEND
    _BACKEND = _resolve(name)
    try:
        yield
    finally:
        _BACKEND = prev


def _out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


# ---------------------------------------------------------------------------
# numpy fallback: one strided slice per kernel offset
# ---------------------------------------------------------------------------


def _im2col_numpy(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh, ow = _out_hw(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    oh, ow = _out_hw(h, w, kh, kw, stride, pad)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# numba kernels: contiguous row copies, no padded temporary
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, fastmath=True)
    def _im2col_numba(x, kh, kw, stride, pad, cols):
        b, c, h, w = x.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        for n in range(b):
            col = 0
            for ch in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        # output columns whose input column lands inside [0, w)
                        lo = (pad - kx + stride - 1) // stride
                        if lo < 0:
                            lo = 0
                        hi = (w - 1 - kx + pad) // stride
                        if hi > ow - 1:
                            hi = ow - 1
                        for oy in range(oh):
                            iy = oy * stride + ky - pad
                            base = oy * ow
                            if iy < 0 or iy >= h:
                                for ox in range(ow):
                                    cols[n, col, base + ox] = 0.0
                            else:
                                for ox in range(lo):
                                    cols[n, col, base + ox] = 0.0
                                ix = lo * stride + kx - pad
                                for ox in range(lo, hi + 1):
                                    cols[n, col, base + ox] = x[n, ch, iy, ix]
                                    ix += stride
                                for ox in range(hi + 1, ow):
                                    cols[n, col, base + ox] = 0.0
                        col += 1

    @njit(cache=True, fastmath=True)
    def _col2im_numba(cols, kh, kw, stride, pad, out):
        b, c, h, w = out.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        for n in range(b):
            col = 0
            for ch in range(c):
                for ky in range(kh):
                    for kx in range(kw):
                        lo = (pad - kx + stride - 1) // stride
                        if lo < 0:
                            lo = 0
                        hi = (w - 1 - kx + pad) // stride
                        if hi > ow - 1:
                            hi = ow - 1
                        for oy in range(oh):
                            iy = oy * stride + ky - pad
                            if 0 <= iy < h:
                                base = oy * ow
                                ix = lo * stride + kx - pad
                                for ox in range(lo, hi + 1):
                                    out[n, ch, iy, ix] += cols[n, col, base + ox]
                                    ix += stride
                        col += 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Patch matrix [B, C*KH*KW, OH*OW] of x [B, C, H, W], zero padded."""
    if _BACKEND == "numpy":
        return _im2col_numpy(x, kh, kw, stride, pad)
    b, c, h, w = x.shape
    oh, ow = _out_hw(h, w, kh, kw, stride, pad)
    cols = np.empty((b, c * kh * kw, oh * ow), dtype=x.dtype)
    _im2col_numba(np.ascontiguousarray(x), kh, kw, stride, pad, cols)
    return cols


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch rows back onto an image of x_shape."""
    if _BACKEND == "numpy":
        return _col2im_numpy(cols, x_shape, kh, kw, stride, pad)
    out = np.zeros(x_shape, dtype=cols.dtype)
    _col2im_numba(np.ascontiguousarray(cols), kh, kw, stride, pad, out)
    return out
