"""Kernel backend selection.

The heavy inner loops (conv2d patch gather/scatter, pixelwise colorspace
conversion) have two interchangeable implementations: a Cython extension and a
pure-numpy fallback. The extension is used when importable; set
``CHROMADIFF_KERNELS=fallback`` or ``=ext`` to force one (forcing ``ext`` when
it is not built raises at import).
"""

import os

from . import fallback

_choice = os.environ.get("CHROMADIFF_KERNELS", "auto").lower()
if _choice not in ("auto", "ext", "fallback"):
    raise ValueError(f"CHROMADIFF_KERNELS must be auto/ext/fallback, got {_choice!r}")

if _choice == "fallback":
    impl = fallback
else:
    try:
        from . import _ext as impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "ext":
            raise
        impl = fallback

BACKEND = impl.BACKEND

im2col = impl.im2col
col2im = impl.col2im
conv_out_size = impl.conv_out_size
srgb_decode = impl.srgb_decode
srgb_encode = impl.srgb_encode
rgb_to_lab = impl.rgb_to_lab
lab_to_rgb = impl.lab_to_rgb

RGB_TO_XYZ = impl.RGB_TO_XYZ
XYZ_TO_RGB = impl.XYZ_TO_RGB
WHITE_POINT = impl.WHITE_POINT
