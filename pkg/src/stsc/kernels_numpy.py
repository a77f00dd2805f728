"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Cross-correlation semantics (no kernel flip), zero padding, floor output
size. These are the fallback for environments without numba and the
reference the numba path is benchmarked against.
"""

import numpy as np


def _im2col(xp, kh, kw, stride, ho, wo):
    """[n, ci, hp, wp] (already padded) -> [n, ci*kh*kw, ho*wo]."""
    n, ci, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ci, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return cols.reshape(n, ci * kh * kw, ho * wo)


def conv2d_forward(x, w, b, stride, padding):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.reshape(co, ci * kh * kw)
    out = np.einsum("ok,nkp->nop", wm, cols, optimize=True)
    out += b.reshape(1, co, 1)
    return np.ascontiguousarray(out.reshape(n, co, ho, wo))


def conv2d_backward_input(gout, w, x_shape, stride, padding):
    n, ci, h, wd = x_shape
    co, _, kh, kw = w.shape
    _, _, ho, wo = gout.shape
    wm = w.reshape(co, ci * kh * kw)
    # [n, ci*kh*kw, ho*wo]
    gcols = np.einsum("ok,nop->nkp", wm, gout.reshape(n, co, ho * wo), optimize=True)
    gcols = gcols.reshape(n, ci, kh, kw, ho, wo)
    hp, wp = h + 2 * padding, wd + 2 * padding
    gxp = np.zeros((n, ci, hp, wp), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, :, i, j
            ]
    if padding:
        return np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + wd])
    return gxp


def conv2d_backward_weight(gout, x, w_shape, stride, padding):
    co, ci, kh, kw = w_shape
    n = x.shape[0]
    _, _, ho, wo = gout.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    gw = np.einsum("nop,nkp->ok", gout.reshape(n, co, ho * wo), cols, optimize=True)
    gb = gout.sum(axis=(0, 2, 3))
    return gw.reshape(co, ci, kh, kw), gb
