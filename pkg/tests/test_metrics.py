"""Metric tests against independent oracles and the documented edge cases.

The SSIM oracle here recomputes the windowed statistics from their
definitions (explicit 2D windows, centered moments) rather than the separable
raw-moment route the implementation uses, so agreement is meaningful.
"""

import csv
import math

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from chromadiff import colorspace as cs
from chromadiff import metrics
from chromadiff.metrics import (MetricsError, MetricsReport, evaluate_arrays,
                                evaluate_files, format_metric, lab_mse, mae,
                                psnr, ssim, write_report_csv)


def oracle_psnr(a, b):
    h, w, c = a.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                d = a[i, j, k] * 255.0 - b[i, j, k] * 255.0
                acc += d * d
    mse = acc / (h * w * c)
    return math.inf if mse == 0 else 20 * math.log10(255) - 10 * math.log10(mse)


def oracle_mae(a, b):
    h, w, c = a.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                acc += abs(a[i, j, k] - b[i, j, k]) * 255.0
    return acc / (h * w * c)


def oracle_lab_mse(a, b):
    la, lb = cs.rgb_to_lab(a), cs.rgb_to_lab(b)
    h, w, _ = a.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(3):
                acc += (la[i, j, k] - lb[i, j, k]) ** 2
    return acc / (h * w)


def oracle_ssim(a, b):
    # explicit 2D windows, centered weighted moments
    x1d = np.arange(11) - 5.0
    k1d = np.exp(-x1d ** 2 / (2 * 1.5 ** 2))
    k1d /= k1d.sum()
    w = np.outer(k1d, k1d)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for ch in range(3):
        x = a[..., ch] * 255.0
        y = b[..., ch] * 255.0
        wx = sliding_window_view(x, (11, 11))
        wy = sliding_window_view(y, (11, 11))
        mu_x = (wx * w).sum(axis=(-2, -1))
        mu_y = (wy * w).sum(axis=(-2, -1))
        dx = wx - mu_x[..., None, None]
        dy = wy - mu_y[..., None, None]
        var_x = (w * dx * dx).sum(axis=(-2, -1))
        var_y = (w * dy * dy).sum(axis=(-2, -1))
        cov = (w * dx * dy).sum(axis=(-2, -1))
        s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / \
            ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def test_psnr_identical_is_inf(rng):
    x = rng.random((16, 16, 3))
    assert psnr(x, x) == math.inf


def test_psnr_constant_offset():
    a = np.full((8, 8, 3), 100 / 255.0)
    b = np.full((8, 8, 3), 110 / 255.0)
    assert psnr(a, b) == pytest.approx(28.1308, abs=1e-4)


def test_psnr_symmetry(rng):
    for _ in range(100):
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        assert psnr(a, b) == psnr(b, a)


def test_psnr_monotone_in_noise(rng):
    base = rng.random((32, 32, 3)) * 0.5 + 0.25
    noise = rng.standard_normal(base.shape)
    vals = []
    for amp in (0.01, 0.02, 0.05, 0.1, 0.2):
        noisy = np.clip(base + amp * noise, 0.0, 1.0)
        vals.append(psnr(base, noisy))
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_psnr_against_loop_oracle(rng):
    a, b = rng.random((9, 7, 3)), rng.random((9, 7, 3))
    assert psnr(a, b) == pytest.approx(oracle_psnr(a, b), abs=1e-9)


def test_mae_cases(rng):
    x = rng.random((10, 10, 3))
    assert mae(x, x) == 0.0
    a = np.full((4, 4, 3), 0.2)
    b = np.full((4, 4, 3), 0.2 + 10 / 255.0)
    assert mae(a, b) == pytest.approx(10.0, abs=1e-9)
    c, d = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    assert mae(c, d) == mae(d, c)
    assert mae(c, d) == pytest.approx(oracle_mae(c, d), abs=1e-9)


def test_lab_mse_cases(rng):
    x = rng.random((6, 6, 3))
    assert lab_mse(x, x) == 0.0
    white = np.ones((1, 1, 3))
    black = np.zeros((1, 1, 3))
    assert lab_mse(white, black) == pytest.approx(10000.0, abs=1e-6)
    a, b = rng.random((7, 5, 3)), rng.random((7, 5, 3))
    assert lab_mse(a, b) == pytest.approx(oracle_lab_mse(a, b), abs=1e-9)
    assert lab_mse(a, b) == lab_mse(b, a)


def test_ssim_identical(rng):
    x = rng.random((24, 24, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_symmetry(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_against_oracle(rng):
    for _ in range(5):
        a, b = rng.random((20, 28, 3)), rng.random((20, 28, 3))
        assert ssim(a, b) == pytest.approx(oracle_ssim(a, b), abs=1e-4)


def test_ssim_inverted_noise_against_oracle(rng):
    x = rng.random((32, 32, 3))
    assert ssim(x, 1.0 - x) == pytest.approx(oracle_ssim(x, 1.0 - x), abs=1e-4)


def test_ssim_single_window(rng):
    # 11x11 image has exactly one valid window; recompute it with plain loops
    a, b = rng.random((11, 11, 3)), rng.random((11, 11, 3))
    x1d = np.arange(11) - 5.0
    k1d = np.exp(-x1d ** 2 / (2 * 1.5 ** 2))
    k1d /= k1d.sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    chans = []
    for ch in range(3):
        mx = my = vx = vy = cov = 0.0
        for i in range(11):
            for j in range(11):
                wt = k1d[i] * k1d[j]
                mx += wt * a[i, j, ch] * 255
                my += wt * b[i, j, ch] * 255
        for i in range(11):
            for j in range(11):
                wt = k1d[i] * k1d[j]
                vx += wt * (a[i, j, ch] * 255 - mx) ** 2
                vy += wt * (b[i, j, ch] * 255 - my) ** 2
                cov += wt * (a[i, j, ch] * 255 - mx) * (b[i, j, ch] * 255 - my)
        chans.append(((2 * mx * my + c1) * (2 * cov + c2)) /
                     ((mx * mx + my * my + c1) * (vx + vy + c2)))
    assert ssim(a, b) == pytest.approx(float(np.mean(chans)), abs=1e-9)


def test_ssim_too_small(rng):
    a = rng.random((10, 64, 3))
    with pytest.raises(MetricsError):
        ssim(a, a)


def test_shape_mismatch():
    with pytest.raises(MetricsError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(MetricsError):
        mae(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))
    with pytest.raises(MetricsError):
        lab_mse(np.zeros((4, 4)), np.zeros((4, 4)))


def test_report_validation():
    with pytest.raises(MetricsError):
        MetricsReport(psnr_db=30, ssim=1.5, mae=1, lab_mse=1, n_images=1)
    with pytest.raises(MetricsError):
        MetricsReport(psnr_db=30, ssim=0.5, mae=1, lab_mse=1, n_images=0)
    with pytest.raises(MetricsError):
        MetricsReport(psnr_db=30, ssim=0.5, mae=-1, lab_mse=1, n_images=2)


def test_format_metric():
    assert format_metric(math.inf) == "inf"
    assert format_metric(1.25) == "1.25"
    assert float(format_metric(1 / 3)) == 1 / 3  # round-trips exactly


def test_evaluate_arrays_aggregate(rng):
    a = rng.random((16, 16, 3))
    b = np.clip(a + 0.05, 0, 1)
    c = rng.random((16, 16, 3))
    rows, rep = evaluate_arrays([(a, b), (a, c)], names=["x", "y"])
    assert [r["name"] for r in rows] == ["x", "y"]
    assert rep.n_images == 2
    assert rep.psnr_db == pytest.approx(
        (rows[0]["psnr_db"] + rows[1]["psnr_db"]) / 2)
    # an identical pair makes the aggregate PSNR the +inf sentinel
    _, rep2 = evaluate_arrays([(a, a), (a, c)])
    assert rep2.psnr_db == math.inf
    assert math.isfinite(rep2.ssim)


def test_evaluate_files_roundtrip(tmp_path, rng):
    names = []
    for i in range(3):
        gen = rng.random((16, 16, 3))
        tgt = np.clip(gen + rng.normal(0, 0.03, gen.shape), 0, 1)
        gp, tp = tmp_path / f"gen{i}.png", tmp_path / f"tgt{i}.png"
        cs.save_image(gp, gen)
        cs.save_image(tp, tgt)
        names.append((str(gp), str(tp)))
    pairs_csv = tmp_path / "pairs.csv"
    with open(pairs_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generated", "target"])
        w.writerows(names)
    out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    rows, rep = evaluate_files(pairs_csv, out1)
    evaluate_files(pairs_csv, out2)
    assert out1.read_bytes() == out2.read_bytes()  # determinism
    lines = out1.read_text().strip().split("\n")
    assert lines[0] == "name,psnr_db,ssim,mae,lab_mse"
    assert len(lines) == 5  # header + 3 images + mean
    assert lines[-1].startswith("mean,")
    # values in the CSV parse back to the returned report exactly
    last = lines[-1].split(",")
    assert float(last[1]) == rep.psnr_db
    assert float(last[4]) == rep.lab_mse


def test_evaluate_files_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\nx.png,y.png\n")
    with pytest.raises(MetricsError):
        evaluate_files(p)


def test_inf_serialization(tmp_path, rng):
    x = rng.random((16, 16, 3))
    rows, rep = evaluate_arrays([(x, x)], names=["same"])
    out = tmp_path / "r.csv"
    write_report_csv(out, rows, rep)
    body = out.read_text()
    assert "same,inf," in body
    assert "mean,inf," in body
