"""Direct nested-loop implementations used as oracles for the fast ops.

These are deliberately literal and slow. Nothing in the training path
calls them.
"""

import math

import numpy as np


def conv2d_naive(x, weight, bias=None, stride=(1, 1), padding=(0, 0)):
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                yi = i * sh + di - ph
                                xj = j * sw + dj - pw
                                if 0 <= yi < h and 0 <= xj < w:
                                    acc += x[b, ic, yi, xj] * weight[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


def maxpool2d_naive(x, window=(5, 5), stride=(1, 1), padding=(2, 2)):
    n, c, h, w = x.shape
    kh, kw = window
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = -math.inf
                    for di in range(kh):
                        for dj in range(kw):
                            yi = i * sh + di - ph
                            xj = j * sw + dj - pw
                            if 0 <= yi < h and 0 <= xj < w and x[b, ch, yi, xj] > best:
                                best = x[b, ch, yi, xj]
                    out[b, ch, i, j] = best
    return out


def bilinear_naive(x, out_h, out_w):
    n, c, h, w = x.shape
    out = np.empty((n, c, out_h, out_w), dtype=np.float64)

    def source(d, size_in, size_out):
        s = (d + 0.5) * size_in / size_out - 0.5
        s = min(max(s, 0.0), size_in - 1)
        i0 = int(math.floor(s))
        return i0, min(i0 + 1, size_in - 1), s - i0

    for i in range(out_h):
        y0, y1, fy = source(i, h, out_h)
        for j in range(out_w):
            x0, x1, fx = source(j, w, out_w)
            out[:, :, i, j] = (
                (1 - fy) * (1 - fx) * x[:, :, y0, x0]
                + (1 - fy) * fx * x[:, :, y0, x1]
                + fy * (1 - fx) * x[:, :, y1, x0]
                + fy * fx * x[:, :, y1, x1]
            )
    return out
