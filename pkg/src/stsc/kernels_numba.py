"""Numba-jitted convolution kernels.

Shift-accumulate formulation: for each (out-channel, in-channel, kernel
tap) the whole output plane is updated with one strided-slice FMA, which
vectorizes well. Same contracts as kernels_numpy. Loop order is fixed,
so results are bit-identical run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _conv2d_forward_padded(xp, w, b, stride, ho, wo):
    n, ci, hp, wp = xp.shape
    co = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    out = np.empty((n, co, ho, wo), dtype=xp.dtype)
    for i in range(n):
        for oc in range(co):
            acc = np.full((ho, wo), b[oc], dtype=xp.dtype)
            for c in range(ci):
                plane = xp[i, c]
                for u in range(kh):
                    for v in range(kw):
                        acc += w[oc, c, u, v] * plane[
                            u : u + stride * ho : stride,
                            v : v + stride * wo : stride]
            out[i, oc] = acc
    return out


@njit(cache=True)
def _conv2d_backward_input_padded(gout, w, gxp, stride):
    n, co, ho, wo = gout.shape
    ci = w.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    for i in range(n):
        for c in range(ci):
            plane = gxp[i, c]
            for oc in range(co):
                g = gout[i, oc]
                for u in range(kh):
                    for v in range(kw):
                        plane[u : u + stride * ho : stride,
                              v : v + stride * wo : stride] += w[oc, c, u, v] * g
    return gxp


@njit(cache=True)
def _conv2d_backward_weight_padded(gout, xp, gw, gb, stride):
    n, co, ho, wo = gout.shape
    ci = gw.shape[1]
    kh, kw = gw.shape[2], gw.shape[3]
    for i in range(n):
        for oc in range(co):
            g = gout[i, oc]
            gb[oc] += g.sum()
            for c in range(ci):
                plane = xp[i, c]
                for u in range(kh):
                    for v in range(kw):
                        gw[oc, c, u, v] += np.sum(
                            g * plane[u : u + stride * ho : stride,
                                      v : v + stride * wo : stride])


def _pad(x, padding):
    if padding:
        return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return np.ascontiguousarray(x)


def conv2d_forward(x, w, b, stride, padding):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = _pad(x, padding)
    return _conv2d_forward_padded(xp, np.ascontiguousarray(w),
                                  np.ascontiguousarray(b), stride, ho, wo)


def conv2d_backward_input(gout, w, x_shape, stride, padding):
    n, ci, h, wd = x_shape
    gxp = np.zeros((n, ci, h + 2 * padding, wd + 2 * padding), dtype=gout.dtype)
    _conv2d_backward_input_padded(np.ascontiguousarray(gout),
                                  np.ascontiguousarray(w), gxp, stride)
    if padding:
        return np.ascontiguousarray(gxp[:, :, padding : padding + h,
                                        padding : padding + wd])
    return gxp


def conv2d_backward_weight(gout, x, w_shape, stride, padding):
    xp = _pad(x, padding)
    gw = np.zeros(w_shape, dtype=gout.dtype)
    gb = np.zeros(w_shape[0], dtype=gout.dtype)
    _conv2d_backward_weight_padded(np.ascontiguousarray(gout), xp, gw, gb, stride)
    return gw, gb
