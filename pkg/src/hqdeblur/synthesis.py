"""Training-data synthesis: motion kernels, blurred observations, datasets.

Linear kernels are anti-aliased line segments; nonlinear kernels come from
smoothed random-walk trajectories standing in for recorded camera shake.
Both families are rasterized by bilinear splatting onto an odd-sized grid
and normalized onto the kernel simplex.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import splev, splprep

from . import dblt, ppm
from .spectral import circular_convolve

_MASS_EPS = 1e-12


def _splat(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray,
           weights: np.ndarray) -> None:
    """Accumulate point masses with a bilinear footprint; out-of-grid
    samples are dropped (callers guarantee or tolerate the loss)."""
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    h, w = grid.shape
    for dy, dx, part in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                         (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy = y0 + dy
        xx = x0 + dx
        keep = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        np.add.at(grid, (yy[keep], xx[keep]), weights[keep] * part[keep])


def _delta(size: int) -> np.ndarray:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def _check_size(size: int) -> None:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel grid extent must be odd and positive, got {size}")


def linear_kernel(angle: float, length: float, size: int = 31) -> np.ndarray:
    """Anti-aliased straight motion kernel, centered in its grid.

    The segment covers `length` pixels tip to tip along direction
    (cos angle, sin angle) measured from the horizontal axis.
    """
    _check_size(size)
    if length < 1:
        raise ValueError("length must be at least one pixel")
    half = (length - 1) / 2.0
    reach = half * max(abs(math.cos(angle)), abs(math.sin(angle)))
    if reach > (size - 1) / 2.0 + 1e-9:
        raise ValueError(f"length {length} does not fit a {size}x{size} grid "
                         f"at angle {angle}")
    n = max(int(math.ceil(length)) * 16 + 1, 2)
    t = np.linspace(-half, half, n)
    center = size // 2
    grid = np.zeros((size, size))
    _splat(grid, center + t * math.sin(angle), center + t * math.cos(angle),
           np.full(n, 1.0 / n))
    return grid / grid.sum()


def linear_kernels(n_angles: int = 16, n_lengths: int = 16, size: int = 31,
                   min_len: float = 5.0, max_len: float = 20.0) -> list[np.ndarray]:
    """The full angle x length grid; defaults give 256 kernels."""
    if n_angles < 1 or n_lengths < 1:
        raise ValueError("need at least one angle and one length")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    angles = np.linspace(0.0, math.pi, n_angles, endpoint=False)
    lengths = np.linspace(min_len, max_len, n_lengths)
    return [linear_kernel(a, l, size) for a in angles for l in lengths]


def _random_trajectory(rng: np.random.Generator, steps: int = 96,
                       momentum: float = 0.7, jerk: float = 0.35) -> np.ndarray:
    """Momentum-damped 2-D random walk; rows are (y, x) positions."""
    vel = np.zeros(2)
    pos = np.zeros(2)
    points = [pos.copy()]
    for _ in range(steps):
        vel = momentum * vel + jerk * rng.standard_normal(2)
        pos = pos + vel
        points.append(pos.copy())
    return np.array(points)


def _smooth_resample(points: np.ndarray, n: int = 256) -> np.ndarray:
    """Cubic-spline smoothing plus dense resampling along the path."""
    distinct = np.ones(len(points), dtype=bool)
    distinct[1:] = np.any(np.diff(points, axis=0) != 0.0, axis=1)
    pts = points[distinct]
    if len(pts) < 4:
        return points
    tck, _ = splprep([pts[:, 0], pts[:, 1]], s=0.05 * len(pts), k=3)
    ys, xs = splev(np.linspace(0.0, 1.0, n), tck)
    return np.stack([ys, xs], axis=1)


def trajectory_kernel(points: np.ndarray, size: int = 31) -> np.ndarray:
    """Rasterize a trajectory into a centered kernel; degenerate paths
    (no motion, or all mass off-grid) fall back to the identity kernel."""
    _check_size(size)
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 1:
        raise ValueError("trajectory must be an (n, 2) array")
    if not np.all(np.isfinite(points)):
        raise ValueError("trajectory contains non-finite positions")
    centered = points - points.mean(axis=0)
    grid = np.zeros((size, size))
    center = size // 2
    _splat(grid, center + centered[:, 0], center + centered[:, 1],
           np.full(len(points), 1.0 / len(points)))
    mass = grid.sum()
    if mass <= _MASS_EPS:
        return _delta(size)
    return grid / mass


def trajectory_kernels(count: int, size: int = 31, seed: int = 0,
                       scales: int = 4, rotations: int = 8) -> list[np.ndarray]:
    """Seeded trajectory kernels augmented over scales and rotations.

    Returns count * scales * rotations kernels, deterministically.
    """
    _check_size(size)
    if count < 1 or scales < 1 or rotations < 1:
        raise ValueError("count, scales, and rotations must be positive")
    max_radius = max(size // 2 - 1, 1)
    kernels = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        path = _smooth_resample(_random_trajectory(rng))
        path = path - path.mean(axis=0)
        radius = float(np.max(np.hypot(path[:, 0], path[:, 1])))
        for s in range(1, scales + 1):
            factor = 0.0 if radius <= _MASS_EPS else \
                (max_radius * s / scales) / radius
            scaled = path * factor
            for r in range(rotations):
                theta = 2.0 * math.pi * r / rotations
                rot = np.array([[math.cos(theta), -math.sin(theta)],
                                [math.sin(theta), math.cos(theta)]])
                kernels.append(trajectory_kernel(scaled @ rot.T, size))
    return kernels


@dataclass
class Sample:
    """One synthesized observation with its ground truth and provenance."""

    x: np.ndarray
    k: np.ndarray
    y: np.ndarray
    noise_std: float
    seed: object

    def triple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(blurred, sharp, kernel) as the trainer consumes it."""
        return self.y, self.x, self.k


def synthesize(x: np.ndarray, k: np.ndarray, noise_std: float = 0.01,
               seed=0) -> Sample:
    """Blur a sharp image with a kernel and add seeded Gaussian noise.

    The kernel's [0, 0] entry anchors at the image origin (circular
    convolution); intensities stay linear, deliberately unclipped.
    """
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    if x.ndim == 2:
        y = circular_convolve(x, k)
    elif x.ndim == 3 and x.shape[0] == 3:
        y = np.stack([circular_convolve(ch, k) for ch in x])
    else:
        raise ValueError(f"expected (H, W) or (3, H, W) image, got {x.shape}")
    if noise_std > 0:
        y = y + np.random.default_rng(seed).normal(scale=noise_std,
                                                   size=y.shape)
    return Sample(x=x, k=k, y=y, noise_std=noise_std, seed=seed)


def synthetic_sharp_image(shape: tuple[int, int] = (64, 64),
                          seed: int = 0) -> np.ndarray:
    """Piecewise-constant scene: overlapping rectangles and disks on a
    graded background. Sharp edges at many orientations make the blur
    identifiable, which is what a deconvolution exercise needs."""
    rng = np.random.default_rng(seed)
    h, w = shape
    if h < 8 or w < 8:
        raise ValueError("scene must be at least 8x8")
    rows = np.arange(h)[:, None] / max(h - 1, 1)
    cols = np.arange(w)[None, :] / max(w - 1, 1)
    image = 0.15 + 0.2 * (rng.random() * rows + rng.random() * cols)
    for _ in range(6):
        top = rng.integers(0, h - 4)
        left = rng.integers(0, w - 4)
        height = int(rng.integers(h // 8, h // 2 + 1))
        width = int(rng.integers(w // 8, w // 2 + 1))
        image[top:top + height, left:left + width] = rng.uniform(0.05, 0.95)
    for _ in range(3):
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        radius = rng.uniform(min(h, w) / 12, min(h, w) / 5)
        disk = (np.arange(h)[:, None] - cy) ** 2 + \
            (np.arange(w)[None, :] - cx) ** 2 <= radius ** 2
        image[disk] = rng.uniform(0.05, 0.95)
    return np.clip(image, 0.0, 1.0)


def _image_name(prefix: str, index: int, color: bool) -> str:
    return f"{prefix}{index:04d}." + ("ppm" if color else "pgm")


def build_dataset(out_dir, sharp_images: Sequence[np.ndarray],
                  kernels: Sequence[np.ndarray], noise_std: float = 0.01,
                  seed: int = 0) -> list[Sample]:
    """Write a dataset directory: kernels/, sharp/, blurred/, manifest.csv.

    Sample i pairs sharp image i with kernel i mod len(kernels); its noise
    stream derives from (seed, i). Images are stored 8-bit, so blurred
    pixels are clipped and quantized on disk while the returned samples
    keep full precision.
    """
    if not sharp_images or not kernels:
        raise ValueError("need at least one sharp image and one kernel")
    out_dir = Path(out_dir)
    for sub in ("kernels", "sharp", "blurred"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for j, k in enumerate(kernels):
        dblt.write_tensor(out_dir / "kernels" / f"k{j:04d}.dblt",
                          np.asarray(k, dtype=float))
    samples = []
    rows = []
    for i, x in enumerate(sharp_images):
        j = i % len(kernels)
        sample = synthesize(x, kernels[j], noise_std, seed=[seed, i])
        color = sample.x.ndim == 3
        ppm.write_image(out_dir / "sharp" / _image_name("s", i, color),
                        sample.x)
        ppm.write_image(out_dir / "blurred" / _image_name("b", i, color),
                        sample.y)
        samples.append(sample)
        rows.append([i, j, seed, f"{noise_std:.10g}", int(color)])
    header = ["id", "kernel_id", "seed", "noise_std", "color"]
    lines = [",".join(map(str, row)) for row in ([header] + rows)]
    dblt.atomic_write_bytes(out_dir / "manifest.csv",
                            ("\n".join(lines) + "\n").encode("ascii"))
    return samples


def load_dataset(root) -> list[Sample]:
    """Read a dataset directory back into full-precision-on-disk samples.

    Images come back through the 8-bit files, so y is the quantized,
    clipped observation actually stored.
    """
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    samples = []
    with open(manifest, newline="") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            i = int(row["id"])
            color = bool(int(row.get("color", "0")))
            k = dblt.read_tensor_file(
                root / "kernels" / f"k{int(row['kernel_id']):04d}.dblt")
            x = ppm.read_image(root / "sharp" / _image_name("s", i, color))
            y = ppm.read_image(root / "blurred" / _image_name("b", i, color))
            samples.append(Sample(x=x, k=k, y=y,
                                  noise_std=float(row["noise_std"]),
                                  seed=[int(row["seed"]), i]))
    if not samples:
        raise ValueError(f"manifest under {root} lists no samples")
    return samples
