"""Image-quality metrics (PSNR / SSIM / MAE / LAB-space MSE) and batch reports.

All metrics take two pixel images — float arrays of shape (H, W, 3) with
sRGB values in [0, 1] — and reduce deterministically, so repeated runs over
the same files produce byte-identical reports.  PSNR, SSIM and MAE follow the
usual 8-bit conventions (dynamic range 255); lab_mse works in CIELAB where a
fixed numeric gap is closer to a fixed perceptual gap.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import colorspace

__all__ = [
    "MetricsError", "MetricsReport", "psnr", "ssim", "mae", "lab_mse",
    "evaluate_pair", "evaluate_arrays", "evaluate_files", "format_metric",
]

# SSIM constants (Wang et al. 2004 defaults, 8-bit dynamic range).
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 255.0


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    """Aggregate quality metrics over a batch of image pairs.

    psnr_db is math.inf when every pair in the batch was identical; it is
    serialized as the string "inf" in CSV reports.
    """

    psnr_db: float
    ssim: float
    mae: float
    lab_mse: float
    n_images: int

    def __post_init__(self):
        if self.n_images < 1:
            raise MetricsError("report needs at least one image")
        if not -1.0 <= self.ssim <= 1.0:
            raise MetricsError(f"ssim out of range: {self.ssim}")
        if self.mae < 0 or self.lab_mse < 0:
            raise MetricsError("mae and lab_mse must be non-negative")


def _check_pair(a, b, min_side=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[-1] != 3:
        raise MetricsError(f"expected (H, W, 3) images, got {a.shape}")
    if min_side is not None and min(a.shape[0], a.shape[1]) < min_side:
        raise MetricsError(
            f"image {a.shape[0]}x{a.shape[1]} smaller than the "
            f"{min_side}x{min_side} analysis window")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on the 0-255 scale.

    Returns math.inf for identical images (zero MSE).
    """
    a, b = _check_pair(a, b)
    mse = float(np.mean((a * 255.0 - b * 255.0) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(255.0) - 10.0 * math.log10(mse)


def mae(a, b):
    """Mean absolute error on the 0-255 scale."""
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a * 255.0 - b * 255.0)))


def lab_mse(a, b):
    """Mean over pixels of the squared CIELAB difference, summed over the
    three channels; a 1x1 white-vs-black pair scores 100^2 = 10000.
    """
    a, b = _check_pair(a, b)
    d = colorspace.rgb_to_lab(a) - colorspace.rgb_to_lab(b)
    return float(np.mean(np.sum(d * d, axis=-1)))


def _gaussian_kernel():
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    k = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


def _filter_valid(img, kern):
    # separable valid-mode correlation over the two leading axes
    out = sliding_window_view(img, len(kern), axis=0) @ kern
    out = sliding_window_view(out, len(kern), axis=1) @ kern
    return out


def ssim(a, b):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel over valid window positions and averaged over the
    three channels.  Requires min(H, W) >= 11.
    """
    a, b = _check_pair(a, b, min_side=_SSIM_WINDOW)
    kern = _gaussian_kernel()
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    vals = []
    for ch in range(3):
        x = a[..., ch] * 255.0
        y = b[..., ch] * 255.0
        mu_x = _filter_valid(x, kern)
        mu_y = _filter_valid(y, kern)
        # weighted second moments; variances via E[x^2] - E[x]^2
        var_x = _filter_valid(x * x, kern) - mu_x * mu_x
        var_y = _filter_valid(y * y, kern) - mu_y * mu_y
        cov = _filter_valid(x * y, kern) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def evaluate_pair(generated, target):
    """All four metrics for one image pair, as a plain dict."""
    return {
        "psnr_db": psnr(generated, target),
        "ssim": ssim(generated, target),
        "mae": mae(generated, target),
        "lab_mse": lab_mse(generated, target),
    }


def _aggregate(rows):
    def mean_of(key):
        return float(np.mean([r[key] for r in rows]))

    psnr_vals = [r["psnr_db"] for r in rows]
    agg_psnr = math.inf if any(math.isinf(v) for v in psnr_vals) \
        else float(np.mean(psnr_vals))
    return MetricsReport(
        psnr_db=agg_psnr,
        ssim=mean_of("ssim"),
        mae=mean_of("mae"),
        lab_mse=mean_of("lab_mse"),
        n_images=len(rows),
    )


def evaluate_arrays(pairs, names=None):
    """Evaluate (generated, target) array pairs in order.

    Returns (rows, report) where rows is a list of per-image dicts carrying
    a "name" key, and report is the aggregate MetricsReport.  Per-image PSNR
    values are averaged (rather than pooling MSE first); identical pairs
    contribute the +inf sentinel, which propagates to the aggregate.
    """
    pairs = list(pairs)
    if not pairs:
        raise MetricsError("no image pairs to evaluate")
    if names is None:
        names = [f"{i:05d}" for i in range(len(pairs))]
    rows = []
    for name, (gen, tgt) in zip(names, pairs):
        row = {"name": str(name)}
        row.update(evaluate_pair(gen, tgt))
        rows.append(row)
    return rows, _aggregate(rows)


def format_metric(value):
    """Shortest round-trip decimal form; +inf becomes the string \"inf\"."""
    if math.isinf(value):
        return "inf"
    return repr(float(value))


_CSV_FIELDS = ("name", "psnr_db", "ssim", "mae", "lab_mse")


def write_report_csv(path, rows, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_FIELDS)
        for row in rows:
            w.writerow([row["name"]] + [format_metric(row[k])
                                        for k in _CSV_FIELDS[1:]])
        w.writerow(["mean"] + [format_metric(getattr(report, k))
                               for k in _CSV_FIELDS[1:]])


def evaluate_files(pairs_csv, out_csv=None):
    """Batch-evaluate a manifest of image path pairs.

    pairs_csv must have a header row ``generated,target`` followed by one
    file-path pair per line.  When out_csv is given, a report CSV is written
    with one row per image (named by the generated file's basename, so the
    report does not depend on where the run directory lives) plus a final
    ``mean`` row.
    """
    path_pairs = []
    with open(pairs_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or \
                not {"generated", "target"} <= set(reader.fieldnames):
            raise MetricsError(
                f"{pairs_csv}: expected 'generated,target' header")
        for rec in reader:
            path_pairs.append((rec["generated"], rec["target"]))
    if not path_pairs:
        raise MetricsError(f"{pairs_csv}: no image pairs listed")
    arrays = [(colorspace.load_image(g), colorspace.load_image(t))
              for g, t in path_pairs]
    rows, report = evaluate_arrays(
        arrays, names=[os.path.basename(g) for g, _ in path_pairs])
    if out_csv is not None:
        write_report_csv(out_csv, rows, report)
    return rows, report
