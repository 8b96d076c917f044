"""Pure-numpy implementations of the hot kernels.

Mirrors the API of the compiled extension (`chromadiff._kernels._ext`) exactly:
same layouts, same accumulation order, so results are interchangeable at the
bit level for the gather/scatter kernels and to ~1 ulp for the transcendental
colorspace kernels.
"""

import numpy as np

BACKEND = "fallback"

# sRGB linear <-> XYZ (D65, 2 degree observer).  Rows are rescaled so each
# sums *exactly* (in float64) to the matching white-point component; without
# that, R=G=B inputs pick up a spurious a*/b* of ~2e-5 because the 500x/200x
# opponent scaling amplifies the 1e-7 row-sum error of the 7-digit constants.
RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.21267287873271212, 0.7151521284847872, 0.07217499278250072],
    [0.0193339, 0.1191920, 0.9503041],
], dtype=np.float64)

# Float64 inverse of RGB_TO_XYZ (kept as literals so the compiled backend can
# embed the same values).
XYZ_TO_RGB = np.array([
    [3.2404548360214087, -1.5371390038164603, -0.498531546868481],
    [-0.9692663898756539, 1.8760111164435842, 0.04155608234667356],
    [0.05564341960421367, -0.2040258746702836, 1.057225162457929],
], dtype=np.float64)

WHITE_POINT = np.array([0.95047, 1.00000, 1.08883], dtype=np.float64)

_DELTA = 6.0 / 29.0
_DELTA3 = _DELTA ** 3
_F_SLOPE = 1.0 / (3.0 * _DELTA ** 2)


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold (B, C, H, W) into patch columns (B, C*kh*kw, OH*OW)."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of im2col: scatter-add columns back to (B, C, H, W)."""
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride,
               j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def srgb_decode(x):
    """sRGB-encoded [0,1] -> linear RGB (elementwise, any shape)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def srgb_encode(x):
    """Linear RGB -> sRGB-encoded (elementwise, any shape).

    Negative (out-of-gamut) inputs stay on the linear segment so they remain
    negative and visible to the caller's clamp accounting.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.0031308, 12.92 * x,
                    1.055 * np.maximum(x, 0.0) ** (1.0 / 2.4) - 0.055)


def _f_cbrt(t):
    return np.where(t > _DELTA3, np.cbrt(t), _F_SLOPE * t + 4.0 / 29.0)


def _f_cbrt_inv(t):
    return np.where(t > _DELTA, t ** 3, (t - 4.0 / 29.0) / _F_SLOPE)


def rgb_to_lab(rgb):
    """sRGB [0,1] (..., 3) -> CIELAB (..., 3), D65 white point."""
    lin = srgb_decode(rgb)
    xyz = lin @ RGB_TO_XYZ.T
    f = _f_cbrt(xyz / WHITE_POINT)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_rgb(lab):
    """CIELAB (..., 3) -> sRGB [0,1] (..., 3) plus out-of-gamut clamp count.

    Returns (rgb, n_clamped) where n_clamped counts scalar channel values that
    fell outside [0, 1] before clamping (tolerance 1e-9 to ignore float fuzz).
    """
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = lab[..., 1] / 500.0 + fy
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_f_cbrt_inv(fx), _f_cbrt_inv(fy), _f_cbrt_inv(fz)],
                   axis=-1) * WHITE_POINT
    lin = xyz @ XYZ_TO_RGB.T
    srgb = srgb_encode(lin)
    n_clamped = int(np.count_nonzero((srgb < -1e-9) | (srgb > 1.0 + 1e-9)))
    return np.clip(srgb, 0.0, 1.0), n_clamped
