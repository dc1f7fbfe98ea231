"""numba loops for the elementwise and row-wise hot spots.

All loops are sequential, so results do not depend on thread counts.
Inputs are C-contiguous; row kernels take 2-D (rows x features) views.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


@njit(cache=True)
def gelu_fwd(x):
    y = np.empty_like(x)
    t = np.empty_like(x)
    for i in range(x.size):
        xi = x[i]
        ti = math.tanh(GELU_C * (xi + GELU_A * xi * xi * xi))
        t[i] = ti
        y[i] = 0.5 * xi * (1.0 + ti)
    return y, t


@njit(cache=True)
def gelu_bwd(x, t, g):
    out = np.empty_like(x)
    for i in range(x.size):
        xi = x[i]
        ti = t[i]
        d = 0.5 * (1.0 + ti) + 0.5 * xi * (1.0 - ti * ti) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi)
        out[i] = g[i] * d
    return out


@njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    rows, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        s = 0.0
        for j in range(d):
            s += x[r, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            c = x[r, j] - mu
            v += c * c
        rs = 1.0 / math.sqrt(v / d + eps)
        rstd[r] = rs
        for j in range(d):
            h = (x[r, j] - mu) * rs
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def layer_norm_bwd(g, xhat, rstd, gamma):
    rows, d = g.shape
    dx = np.empty_like(g)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = g[r, j] * gamma[j]
            m1 += dh
            m2 += dh * xhat[r, j]
        m1 /= d
        m2 /= d
        rs = rstd[r]
        for j in range(d):
            dx[r, j] = (g[r, j] * gamma[j] - m1 - xhat[r, j] * m2) * rs
    return dx


@njit(cache=True)
def softmax_rows(x):
    rows, n = x.shape
    y = np.empty_like(x)
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[r, j] - m)
            y[r, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            y[r, j] = y[r, j] * inv
    return y


@njit(cache=True)
def softmax_rows_bwd(y, g, scale):
    rows, n = y.shape
    dx = np.empty_like(y)
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += g[r, j] * y[r, j]
        for j in range(n):
            dx[r, j] = y[r, j] * (g[r, j] - s) * scale
    return dx


# --- augmentation -----------------------------------------------------------

@njit(cache=True)
def _axis(start, extent, out, i):
    src = start + (i + 0.5) * (extent / out) - 0.5
    lo = float(start)
    hi = float(start + extent - 1)
    if src < lo:
        src = lo
    if src > hi:
        src = hi
    i0 = int(math.floor(src))
    i1 = i0 + 1
    if i1 > start + extent - 1:
        i1 = start + extent - 1
    return i0, i1, np.float32(src - i0)


@njit(cache=True)
def crop_resize_u8(images, src_index, boxes, size, out):
    """Bilinear crop+resize of uint8 images into out (n x size x size x 3) in [0, 1]."""
    n = boxes.shape[0]
    inv = np.float32(1.0 / 255.0)
    for v in range(n):
        img = images[src_index[v]]
        top, left, h, w = boxes[v, 0], boxes[v, 1], boxes[v, 2], boxes[v, 3]
        for i in range(size):
            y0, y1, fy = _axis(top, h, size, i)
            for j in range(size):
                x0, x1, fx = _axis(left, w, size, j)
                for c in range(3):
                    a = np.float32(img[y0, x0, c])
                    b = np.float32(img[y0, x1, c])
                    cc = np.float32(img[y1, x0, c])
                    d = np.float32(img[y1, x1, c])
                    t = a + (b - a) * fx
                    u = cc + (d - cc) * fx
                    out[v, i, j, c] = (t + (u - t) * fy) * inv


@njit(cache=True)
def _clip01(x):
    if x < 0.0:
        return np.float32(0.0)
    if x > 1.0:
        return np.float32(1.0)
    return x


@njit(cache=True)
def _hue_shift(r, g, b, shift):
    maxc = max(r, g, b)
    minc = min(r, g, b)
    v = maxc
    delta = maxc - minc
    if delta <= 0.0:
        return r, g, b
    s = delta / maxc
    rc = (maxc - r) / delta
    gc = (maxc - g) / delta
    bc = (maxc - b) / delta
    if maxc == r:
        h = bc - gc
    elif maxc == g:
        h = 2.0 + rc - bc
    else:
        h = 4.0 + gc - rc
    h = (h / 6.0) % 1.0
    h = (h + shift) % 1.0
    h6 = h * 6.0
    i = int(math.floor(h6))
    f = h6 - i
    i = i % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    if i == 0:
        return v, t, p
    if i == 1:
        return q, v, p
    if i == 2:
        return p, v, t
    if i == 3:
        return p, q, v
    if i == 4:
        return t, p, v
    return v, p, q


@njit(cache=True)
def _reflect(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


@njit(cache=True)
def pixel_pipeline(x, hflip, vflip, jitter_on, factors, gray_on, sigma, solarize_on, threshold):
    """In-place flips, colour jitter, grayscale, Gaussian blur and solarize.

    x: n x S x S x 3 float32 in [0, 1]. ``sigma[v] <= 0`` disables blur.
    """
    n, hh, ww, _ = x.shape
    tmp = np.empty((hh, ww, 3), dtype=np.float32)
    for v in range(n):
        img = x[v]
        if hflip[v]:
            for i in range(hh):
                for j in range(ww // 2):
                    for c in range(3):
                        a = img[i, j, c]
                        img[i, j, c] = img[i, ww - 1 - j, c]
                        img[i, ww - 1 - j, c] = a
        if vflip[v]:
            for i in range(hh // 2):
                for j in range(ww):
                    for c in range(3):
                        a = img[i, j, c]
                        img[i, j, c] = img[hh - 1 - i, j, c]
                        img[hh - 1 - i, j, c] = a
        if jitter_on[v]:
            fb = np.float32(factors[v, 0])
            fc = np.float32(factors[v, 1])
            fs = np.float32(factors[v, 2])
            shift = factors[v, 3]
            acc = 0.0
            for i in range(hh):
                for j in range(ww):
                    for c in range(3):
                        img[i, j, c] = _clip01(img[i, j, c] * fb)
                    acc += np.float32(0.299) * img[i, j, 0] + np.float32(0.587) * img[i, j, 1] + np.float32(0.114) * img[i, j, 2]
            m = np.float32(acc / (hh * ww))
            for i in range(hh):
                for j in range(ww):
                    for c in range(3):
                        img[i, j, c] = _clip01((img[i, j, c] - m) * fc + m)
                    gl = np.float32(0.299) * img[i, j, 0] + np.float32(0.587) * img[i, j, 1] + np.float32(0.114) * img[i, j, 2]
                    for c in range(3):
                        img[i, j, c] = _clip01((img[i, j, c] - gl) * fs + gl)
                    if shift != 0.0:
                        r, g, b = _hue_shift(img[i, j, 0], img[i, j, 1], img[i, j, 2], np.float32(shift))
                        img[i, j, 0] = _clip01(np.float32(r))
                        img[i, j, 1] = _clip01(np.float32(g))
                        img[i, j, 2] = _clip01(np.float32(b))
        if gray_on[v]:
            for i in range(hh):
                for j in range(ww):
                    gl = np.float32(0.299) * img[i, j, 0] + np.float32(0.587) * img[i, j, 1] + np.float32(0.114) * img[i, j, 2]
                    img[i, j, 0] = gl
                    img[i, j, 1] = gl
                    img[i, j, 2] = gl
        if sigma[v] > 0.0:
            sg = sigma[v]
            rad = int(math.ceil(3.0 * sg))
            rad = min(rad, hh - 1, ww - 1)
            k = np.empty(2 * rad + 1, dtype=np.float32)
            tot = 0.0
            for t in range(-rad, rad + 1):
                e = math.exp(-(t * t) / (2.0 * sg * sg))
                k[t + rad] = e
                tot += e
            for t in range(2 * rad + 1):
                k[t] = np.float32(k[t] / tot)
            for i in range(hh):
                for j in range(ww):
                    for c in range(3):
                        s = np.float32(0.0)
                        for t in range(-rad, rad + 1):
                            s += k[t + rad] * img[i, _reflect(j + t, ww), c]
                        tmp[i, j, c] = s
            for i in range(hh):
                for j in range(ww):
                    for c in range(3):
                        s = np.float32(0.0)
                        for t in range(-rad, rad + 1):
                            s += k[t + rad] * tmp[_reflect(i + t, hh), j, c]
                        img[i, j, c] = s
        if solarize_on[v]:
            for i in range(hh):
                for j in range(ww):
                    for c in range(3):
                        if img[i, j, c] >= threshold:
                            img[i, j, c] = np.float32(1.0) - img[i, j, c]
