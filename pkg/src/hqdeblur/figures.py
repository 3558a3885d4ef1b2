"""Figure rendering for training logs and evaluation reports.

Every function writes a PNG next to the delimited output it illustrates and
uses the non-interactive Agg backend, so rendering works in batch jobs with no
display. Outputs are deterministic for fixed inputs.
"""

from __future__ import annotations

import os
import tempfile
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402
from .training import EpochStats  # noqa: E402

_METRIC_LABELS = {
    "psnr_db": "PSNR (dB)",
    "isnr_db": "ISNR (dB)",
    "ssim": "SSIM",
    "kernel_rmse": "kernel RMSE",
}


def _save_atomic(fig, path: str | os.PathLike) -> None:
    """Render to a temp file in the target directory, then rename over."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".fig-", suffix=".png")
    try:
        with os.fdopen(fd, "wb") as fh:
            fig.savefig(fh, format="png", dpi=100)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)


def save_loss_curves(history: Sequence[EpochStats], path: str | os.PathLike) -> None:
    """Plot per-epoch loss terms (log scale) and the learning-rate schedule."""
    if not history:
        raise ValueError("empty training history")
    epochs = [h.epoch for h in history]
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    ax_loss.semilogy(epochs, [h.total for h in history], label="total")
    ax_loss.semilogy(epochs, [h.kernel_term for h in history], label="kernel term")
    ax_loss.semilogy(epochs, [h.image_term for h in history], label="image term")
    ax_loss.set_ylabel("mean batch loss")
    ax_loss.legend()
    ax_loss.grid(True, which="both", alpha=0.3)
    ax_lr.step(epochs, [h.lr for h in history], where="post")
    ax_lr.set_yscale("log")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("lr")
    ax_lr.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    _save_atomic(fig, path)


def save_metric_histograms(report: EvalReport, path: str | os.PathLike) -> None:
    """Histogram each per-sample metric of an evaluation report (2x2 grid)."""
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for ax, field in zip(axes.ravel(), report.fields):
        values = [getattr(row, field) for row in report.rows]
        ax.hist(values, bins=min(20, max(5, len(values))), color="tab:blue",
                edgecolor="black", linewidth=0.5)
        ax.axvline(report.mean(field), color="tab:red", linestyle="--",
                   label=f"mean {report.mean(field):.3g}")
        ax.set_xlabel(_METRIC_LABELS[field])
        ax.set_ylabel("samples")
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save_atomic(fig, path)


def _to_display(image: np.ndarray) -> np.ndarray:
    """Clip to [0, 1]; move color planes last for imshow."""
    image = np.clip(image, 0.0, 1.0)
    if image.ndim == 3:
        return image.transpose(1, 2, 0)
    return image


def save_restoration_panel(samples: Sequence, results: Sequence,
                           path: str | os.PathLike, max_rows: int = 4) -> None:
    """Show blurred/restored/sharp images and true/estimated kernels per sample.

    ``samples`` holds (y, x, k) triples (or objects with a ``triple()``
    method); ``results`` holds the matching forward-pass outputs.
    """
    if len(samples) != len(results):
        raise ValueError("samples and results must pair up one-to-one")
    if not samples:
        raise ValueError("no samples to draw")
    n = min(max_rows, len(samples))
    titles = ("blurred", "restored", "sharp", "true kernel", "estimated kernel")
    fig, axes = plt.subplots(n, 5, figsize=(12, 2.4 * n), squeeze=False)
    for r in range(n):
        sample, out = samples[r], results[r]
        y, x, k = sample.triple() if hasattr(sample, "triple") else sample
        cells = (y, out.image, x, k, out.kernel)
        for c, (ax, cell) in enumerate(zip(axes[r], cells)):
            if c < 3:
                ax.imshow(_to_display(np.asarray(cell)), cmap="gray",
                          vmin=0.0, vmax=1.0, interpolation="nearest")
            else:
                cell = np.asarray(cell)
                ax.imshow(cell, cmap="inferno", vmin=0.0,
                          vmax=max(float(cell.max()), 1e-12),
                          interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(titles[c], fontsize=10)
    fig.tight_layout()
    _save_atomic(fig, path)
