"""PSNR and SSIM, plus per-view evaluation of a trained checkpoint."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DomainError

PSNR_IDENTICAL = 99.0

_K1, _K2 = 0.01, 0.03
_WINDOW = 11
_SIGMA = 1.5


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; 99 dB if identical."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window():
    x = np.arange(_WINDOW) - (_WINDOW - 1) / 2
    g = np.exp(-(x**2) / (2 * _SIGMA**2))
    return g / g.sum()


def _blur(img, kernel):
    # scipy's "reflect" repeats the edge sample, i.e. symmetric padding
    out = correlate1d(img, kernel, axis=0, mode="reflect")
    return correlate1d(out, kernel, axis=1, mode="reflect")


def ssim(a, b):
    """Mean SSIM over pixels, computed per channel and averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < _WINDOW:
        raise DomainError(f"SSIM needs images at least {_WINDOW}x{_WINDOW}, got {a.shape[0]}x{a.shape[1]}")
    c1, c2 = _K1**2, _K2**2
    kernel = _gaussian_window()
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, kernel), _blur(y, kernel)
        vx = _blur(x * x, kernel) - mx * mx
        vy = _blur(y * y, kernel) - my * my
        cov = _blur(x * y, kernel) - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # (view_index, psnr_db, ssim)

    @property
    def mean_psnr(self):
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r[2] for r in self.rows]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view_index", "psnr_db", "ssim"])
            for idx, p, s in self.rows:
                w.writerow([idx, repr(p), repr(s)])
            w.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])


def evaluate(checkpoint, dataset):
    """Render every view of ``dataset`` with the checkpoint's field and score it."""
    from .training import render_view

    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    report = MetricReport()
    for i, (pose, truth) in enumerate(zip(dataset.poses, dataset.images)):
        pred = render_view(checkpoint, pose, dataset.intrinsics)
        report.rows.append((i, psnr(pred, truth), ssim(pred, truth)))
    return report
