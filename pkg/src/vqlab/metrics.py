"""Reconstruction quality and codebook health.

SSIM uses uniform 8x8 windows at stride 1 with C1 = 0.01**2 and
C2 = 0.03**2, on the channel-mean grayscale image. PSNR assumes a peak of
1.0 and reports :data:`PSNR_CAP` for exact reconstructions.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 8
C1 = 0.01**2
C2 = 0.03**2


def fmt(x):
    """Six significant digits, the format of every float in CSV output."""
    return f"{x:.6g}"


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m):
    if m <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / m)))


def psnr(a, b):
    return psnr_from_mse(mse(a, b))


def _gray(x):
    if x.ndim == 3:
        return x.mean(axis=2)
    if x.ndim == 2:
        return x
    raise ValueError(f"expected an H x W or H x W x C image, got shape {x.shape}")


def ssim(a, b):
    a, b = _pair(a, b)
    ga, gb = _gray(a), _gray(b)
    w = SSIM_WINDOW
    if ga.shape[0] < w or ga.shape[1] < w:
        raise ValueError(f"image {ga.shape} is smaller than the {w}x{w} window")
    pa = sliding_window_view(ga, (w, w))
    pb = sliding_window_view(gb, (w, w))
    mu_a = pa.mean(axis=(2, 3))
    mu_b = pb.mean(axis=(2, 3))
    var_a = pa.var(axis=(2, 3))
    var_b = pb.var(axis=(2, 3))
    cov = ((pa - mu_a[..., None, None]) * (pb - mu_b[..., None, None])).mean(axis=(2, 3))
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


@dataclass
class QualityReport:
    mse: float
    psnr: float
    ssim: float
    per_image: list = field(default_factory=list)

    def as_dict(self):
        return {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}


def quality_report(x_hat, x):
    """Per-image MSE/PSNR/SSIM over a batch plus their means.

    The aggregate MSE is the mean over all pixels, so it equals the mean of
    per-image MSEs for a uniform batch.
    """
    x_hat, x = _pair(x_hat, x)
    if x.ndim == 3:
        x_hat, x = x_hat[None], x[None]
    rows = []
    for a, b in zip(x_hat, x):
        m = mse(a, b)
        rows.append({"mse": m, "psnr": psnr_from_mse(m), "ssim": ssim(a, b)})
    return QualityReport(
        float(np.mean([r["mse"] for r in rows])),
        float(np.mean([r["psnr"] for r in rows])),
        float(np.mean([r["ssim"] for r in rows])),
        rows,
    )


def export_code_activity(counts, path):
    """CSV with columns index, count, active (1 when count >= 1)."""
    counts = np.asarray(counts, dtype=np.int64).reshape(-1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "count", "active"])
        for i, c in enumerate(counts):
            w.writerow([i, int(c), int(c >= 1)])


def read_code_activity(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([int(r["count"]) for r in rows], dtype=np.int64)


def perplexity(counts):
    """exp of the entropy of the code-usage distribution."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
