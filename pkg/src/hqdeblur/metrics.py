"""Evaluation metrics: PSNR, ISNR, SSIM, shift-aligned kernel RMSE.

All image metrics assume intensities on a [0, 1] scale. Values that would
be infinite (zero error) are reported as a 99 dB sentinel with a flag.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from . import dblt
from .backprop import align_shift
from .network import NetworkParams, forward
from .spectral import circular_shift, embed

DB_CAP = 99.0


def _as_image(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        return a
    if a.ndim == 3 and a.shape[0] == 3:
        return a
    raise ValueError(f"{name} must be (H, W) or (3, H, W), got {a.shape}")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = _as_image(a, "first image")
    b = _as_image(b, "second image")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _capped_db(ratio_num: float, ratio_den: float):
    """10*log10(num/den) clamped to [-DB_CAP, DB_CAP]; flags the clamp."""
    if ratio_den == 0.0:
        return DB_CAP, True
    if ratio_num == 0.0:
        return -DB_CAP, True
    db = 10.0 * np.log10(ratio_num / ratio_den)
    if db > DB_CAP:
        return DB_CAP, True
    if db < -DB_CAP:
        return -DB_CAP, True
    return float(db), False


def psnr(a, b, with_flag: bool = False):
    """Peak signal-to-noise ratio in dB against peak intensity 1.0."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    value, capped = _capped_db(1.0, mse)
    return (value, capped) if with_flag else value


def isnr(restored, blurred, sharp, with_flag: bool = False):
    """Improvement in SNR of the restoration over the raw observation."""
    restored, sharp = _pair(restored, sharp)
    blurred, _ = _pair(blurred, sharp)
    num = float(np.sum((blurred - sharp) ** 2))
    den = float(np.sum((restored - sharp) ** 2))
    value, capped = _capped_db(num, den)
    return (value, capped) if with_flag else value


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    line = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    window = np.outer(line, line)
    return window / window.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, window: np.ndarray,
                c1: float, c2: float) -> float:
    def smooth(img):
        return convolve2d(img, window, mode="valid")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / \
        ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(np.mean(score))


def ssim(a, b, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Single-scale structural similarity, 11x11 Gaussian window (sigma 1.5),
    averaged over valid window positions. Color scores average the planes."""
    a, b = _pair(a, b)
    if a.shape[-2] < 11 or a.shape[-1] < 11:
        raise ValueError("ssim needs images of at least 11x11 pixels")
    window = _gaussian_window()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    if a.ndim == 2:
        return _ssim_plane(a, b, window, c1, c2)
    return float(np.mean([_ssim_plane(pa, pb, window, c1, c2)
                          for pa, pb in zip(a, b)]))


def kernel_rmse(estimate, truth) -> float:
    """RMSE between kernels after embedding on a common grid and removing
    the circular-shift ambiguity. Correlation alignment is exact here:
    circular shifts preserve norms, so the best-correlated offset is also
    the RMSE minimizer."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.ndim != 2 or truth.ndim != 2:
        raise ValueError("kernels must be 2-D")
    grid = (max(estimate.shape[0], truth.shape[0]),
            max(estimate.shape[1], truth.shape[1]))
    a = embed(estimate, grid)
    b = embed(truth, grid)
    tau = align_shift(a, b)
    aligned = circular_shift(a, tau.negate())
    return float(np.sqrt(np.mean((aligned - b) ** 2)))


@dataclass
class EvalRow:
    sample_id: str
    psnr_db: float
    isnr_db: float
    ssim: float
    kernel_rmse: float


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def mean(self, name: str) -> float:
        return float(self._column(name).mean())

    @property
    def fields(self) -> tuple[str, ...]:
        return ("psnr_db", "isnr_db", "ssim", "kernel_rmse")


def evaluate_model(params: NetworkParams, samples: Sequence) -> EvalReport:
    """Deblur each (y, x, k) sample with the model and score the outputs."""
    rows = []
    for index, sample in enumerate(samples):
        y, x, k = sample.triple() if hasattr(sample, "triple") else sample
        out = forward(y, params)
        rows.append(EvalRow(
            sample_id=str(index),
            psnr_db=psnr(out.image, x),
            isnr_db=isnr(out.image, y, x),
            ssim=ssim(out.image, x),
            kernel_rmse=kernel_rmse(out.kernel, k),
        ))
    if not rows:
        raise ValueError("no samples to evaluate")
    return EvalReport(rows=rows)


def write_report_csv(path, report: EvalReport) -> None:
    """Per-sample metric rows plus a trailing aggregate-mean row."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["id", "psnr_db", "isnr_db", "ssim", "kernel_rmse"])
    for row in report.rows:
        writer.writerow([row.sample_id] +
                        [f"{getattr(row, f):.12g}" for f in report.fields])
    writer.writerow(["mean"] +
                    [f"{report.mean(f):.12g}" for f in report.fields])
    dblt.atomic_write_bytes(path, buffer.getvalue().encode("ascii"))
