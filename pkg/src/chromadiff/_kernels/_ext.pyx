# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: conv gather/scatter and fused colorspace loops.

Same API and layouts as `chromadiff._kernels.fallback`; the fallback's
docstrings are authoritative.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport cbrt, pow

cnp.import_array()

BACKEND = "ext"

ctypedef fused floating:
    float
    double

# Matrices duplicated from the fallback so either backend stands alone.
# Rows sum exactly (in float64) to the white point, keeping the achromatic
# axis free of spurious a*/b*.
RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.21267287873271212, 0.7151521284847872, 0.07217499278250072],
    [0.0193339, 0.1191920, 0.9503041],
], dtype=np.float64)

XYZ_TO_RGB = np.array([
    [3.2404548360214087, -1.5371390038164603, -0.498531546868481],
    [-0.9692663898756539, 1.8760111164435842, 0.04155608234667356],
    [0.05564341960421367, -0.2040258746702836, 1.057225162457929],
], dtype=np.float64)

WHITE_POINT = np.array([0.95047, 1.00000, 1.08883], dtype=np.float64)

cdef double DELTA = 6.0 / 29.0
cdef double DELTA3 = (6.0 / 29.0) ** 3
cdef double F_SLOPE = 1.0 / (3.0 * (6.0 / 29.0) ** 2)


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(cnp.ndarray x, int kh, int kw, int stride, int pad):
    if x.ndim != 4:
        raise ValueError("im2col expects (B, C, H, W)")
    x = np.ascontiguousarray(x)
    if x.dtype == np.float32:
        return _im2col_impl[float](x, kh, kw, stride, pad)
    elif x.dtype == np.float64:
        return _im2col_impl[double](x, kh, kw, stride, pad)
    raise TypeError(f"unsupported dtype {x.dtype}")


def col2im(cnp.ndarray cols, x_shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    b, c, h, w = x_shape
    if cols.dtype == np.float32:
        return _col2im_impl[float](cols, b, c, h, w, kh, kw, stride, pad)
    elif cols.dtype == np.float64:
        return _col2im_impl[double](cols, b, c, h, w, kh, kw, stride, pad)
    raise TypeError(f"unsupported dtype {cols.dtype}")


cdef _im2col_impl(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_np = np.zeros((b, c * kh * kw, oh * ow),
                      dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] out = out_np
    cdef Py_ssize_t n, ch, i, j, oy, ox, iy, ix, row
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(oh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[n, row, oy * ow + ox] = x[n, ch, iy, ix]
    return out_np


cdef _col2im_impl(floating[:, :, ::1] cols, Py_ssize_t b, Py_ssize_t c,
                  Py_ssize_t h, Py_ssize_t w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_np = np.zeros((b, c, h, w),
                      dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, ::1] out = out_np
    cdef Py_ssize_t n, ch, i, j, oy, ox, iy, ix, row
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(oh):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(ow):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[n, ch, iy, ix] += cols[n, row, oy * ow + ox]
    return out_np


cdef inline double _srgb_decode1(double v) nogil:
    if v <= 0.04045:
        return v / 12.92
    return pow((v + 0.055) / 1.055, 2.4)


cdef inline double _srgb_encode1(double v) nogil:
    if v <= 0.0031308:
        return 12.92 * v
    return 1.055 * pow(v, 1.0 / 2.4) - 0.055


cdef inline double _f_cbrt1(double t) nogil:
    if t > DELTA3:
        return cbrt(t)
    return F_SLOPE * t + 4.0 / 29.0


cdef inline double _f_cbrt_inv1(double t) nogil:
    if t > DELTA:
        return t * t * t
    return (t - 4.0 / 29.0) / F_SLOPE


def srgb_decode(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    _srgb_decode_flat(arr.reshape(-1), out.reshape(-1))
    return out


def srgb_encode(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    _srgb_encode_flat(arr.reshape(-1), out.reshape(-1))
    return out


cdef _srgb_decode_flat(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = _srgb_decode1(x[i])


cdef _srgb_encode_flat(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = _srgb_encode1(x[i])


def rgb_to_lab(rgb):
    arr = np.ascontiguousarray(rgb, dtype=np.float64)
    # wraparound is off module-wide, so avoid shape[-1]
    if arr.ndim < 1 or arr.shape[arr.ndim - 1] != 3:
        raise ValueError("expected (..., 3)")
    out = np.empty_like(arr)
    _rgb_to_lab_flat(arr.reshape(-1, 3), out.reshape(-1, 3))
    return out


def lab_to_rgb(lab):
    arr = np.ascontiguousarray(lab, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[arr.ndim - 1] != 3:
        raise ValueError("expected (..., 3)")
    out = np.empty_like(arr)
    n_clamped = _lab_to_rgb_flat(arr.reshape(-1, 3), out.reshape(-1, 3))
    return out, n_clamped


cdef _rgb_to_lab_flat(double[:, ::1] rgb, double[:, ::1] out):
    cdef Py_ssize_t i, n = rgb.shape[0]
    cdef double r, g, b, fx, fy, fz
    for i in range(n):
        r = _srgb_decode1(rgb[i, 0])
        g = _srgb_decode1(rgb[i, 1])
        b = _srgb_decode1(rgb[i, 2])
        fx = _f_cbrt1((0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047)
        fy = _f_cbrt1(0.21267287873271212 * r + 0.7151521284847872 * g
                      + 0.07217499278250072 * b)
        fz = _f_cbrt1((0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883)
        out[i, 0] = 116.0 * fy - 16.0
        out[i, 1] = 500.0 * (fx - fy)
        out[i, 2] = 200.0 * (fy - fz)


cdef long _lab_to_rgb_flat(double[:, ::1] lab, double[:, ::1] out):
    cdef Py_ssize_t i, k, n = lab.shape[0]
    cdef double fx, fy, fz, x, y, z, v
    cdef double rgb[3]
    cdef long n_clamped = 0
    for i in range(n):
        fy = (lab[i, 0] + 16.0) / 116.0
        fx = lab[i, 1] / 500.0 + fy
        fz = fy - lab[i, 2] / 200.0
        x = _f_cbrt_inv1(fx) * 0.95047
        y = _f_cbrt_inv1(fy)
        z = _f_cbrt_inv1(fz) * 1.08883
        rgb[0] = 3.2404548360214087 * x - 1.5371390038164603 * y - 0.498531546868481 * z
        rgb[1] = -0.9692663898756539 * x + 1.8760111164435842 * y + 0.04155608234667356 * z
        rgb[2] = 0.05564341960421367 * x - 0.2040258746702836 * y + 1.057225162457929 * z
        for k in range(3):
            v = rgb[k]
            if v <= 0.0031308:
                v = 12.92 * v
            else:
                v = 1.055 * pow(v, 1.0 / 2.4) - 0.055
            if v < -1e-9 or v > 1.0 + 1e-9:
                n_clamped += 1
            if v < 0.0:
                v = 0.0
            elif v > 1.0:
                v = 1.0
            out[i, k] = v
    return n_clamped
