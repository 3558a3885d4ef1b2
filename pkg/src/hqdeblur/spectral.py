"""2D spectral primitives: DFT conventions, circular ops, support windows.

Conventions used across the package:

* the forward DFT is unnormalized and the inverse carries the 1/(HW)
  factor (``numpy.fft.fft2`` / ``ifft2`` exactly), so Parseval reads
  ``HW * ||g||^2 == ||dft2(g)||^2``;
* small kernels and filters are embedded into an image grid by
  zero-padding with their [0, 0] entry at the grid origin;
* every convolution in the package is circular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SupportMask",
    "Shift2D",
    "dft2",
    "idft2",
    "embed",
    "restrict",
    "project",
    "circular_convolve",
    "circular_shift",
    "log_sum_exp",
]


def _check_grid(g: np.ndarray, name: str) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim < 2:
        raise ValueError(f"{name} must have at least 2 dimensions, got shape {g.shape}")
    if min(g.shape[-2:]) < 1:
        raise ValueError(f"{name} has an empty spatial extent: shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"{name} contains non-finite values")
    return g


def dft2(g: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT over the trailing two axes of a real array."""
    g = _check_grid(g, "dft2 input")
    if np.iscomplexobj(g):
        raise ValueError("dft2 expects a real array")
    return np.fft.fft2(g, axes=(-2, -1))


def idft2(G: np.ndarray, with_imag: bool = False):
    """Inverse DFT (1/(HW) normalization) returning the real part.

    The imaginary residue of a spectrum that should be Hermitian is
    rounding noise; pass ``with_imag=True`` to also get its max magnitude.
    """
    G = _check_grid(G, "idft2 input")
    out = np.fft.ifft2(G, axes=(-2, -1))
    if with_imag:
        return out.real, float(np.max(np.abs(out.imag)))
    return out.real


@dataclass(frozen=True)
class SupportMask:
    """Rectangular support window inside a grid (top-left anchored)."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"support must be non-empty, got {self.height}x{self.width}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"support anchor must be non-negative, got ({self.top}, {self.left})")

    @classmethod
    def at_origin(cls, height: int, width: int) -> "SupportMask":
        return cls(0, 0, height, width)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def validate_for(self, grid_shape: tuple[int, int]) -> None:
        h, w = grid_shape[-2:]
        if self.top + self.height > h or self.left + self.width > w:
            raise ValueError(
                f"support {self} does not fit within a {h}x{w} grid"
            )


def embed(small: np.ndarray, grid_shape: tuple[int, int],
          mask: SupportMask | None = None) -> np.ndarray:
    """Zero-pad a small array into a grid, anchored at the mask's corner.

    With no mask the small array lands at the grid origin.
    """
    small = np.asarray(small, dtype=float)
    if small.ndim != 2:
        raise ValueError(f"embed expects a 2-D array, got shape {small.shape}")
    if mask is None:
        mask = SupportMask.at_origin(*small.shape)
    if small.shape != mask.shape:
        raise ValueError(f"array shape {small.shape} does not match support {mask.shape}")
    mask.validate_for(grid_shape)
    out = np.zeros(grid_shape[-2:], dtype=float)
    out[mask.top:mask.top + mask.height, mask.left:mask.left + mask.width] = small
    return out


def restrict(grid: np.ndarray, mask: SupportMask) -> np.ndarray:
    """Extract the support window from a grid (adjoint of embed)."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"restrict expects a 2-D array, got shape {grid.shape}")
    mask.validate_for(grid.shape)
    return grid[mask.top:mask.top + mask.height,
                mask.left:mask.left + mask.width].copy()


def project(grid: np.ndarray, mask: SupportMask) -> np.ndarray:
    """Zero everything outside the support window. Idempotent."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError(f"project expects a 2-D array, got shape {grid.shape}")
    mask.validate_for(grid.shape)
    out = np.zeros_like(grid)
    sl = (slice(mask.top, mask.top + mask.height),
          slice(mask.left, mask.left + mask.width))
    out[sl] = grid[sl]
    return out


def circular_convolve(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Circular convolution of a grid with a (possibly small) kernel.

    The kernel is zero-padded to the grid with its [0, 0] entry at the
    grid origin, then the product is taken in the spectral domain.
    """
    a = _check_grid(a, "circular_convolve input")
    if a.ndim != 2:
        raise ValueError("circular_convolve expects a 2-D grid")
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 2:
        raise ValueError("circular_convolve expects a 2-D kernel")
    if kernel.shape[0] > a.shape[0] or kernel.shape[1] > a.shape[1]:
        raise ValueError(
            f"kernel {kernel.shape} larger than grid {a.shape}"
        )
    k_grid = embed(kernel, a.shape)
    return idft2(dft2(a) * dft2(k_grid))


@dataclass(frozen=True)
class Shift2D:
    """Integer circular shift (rows down by dy, columns right by dx)."""

    dy: int
    dx: int

    def negate(self) -> "Shift2D":
        return Shift2D(-self.dy, -self.dx)

    def canonical_for(self, grid_shape: tuple[int, int]) -> "Shift2D":
        """Equivalent shift with components in the centered range
        [-floor(n/2), ceil(n/2))."""
        h, w = grid_shape[-2:]
        dy = (self.dy + h // 2) % h - h // 2
        dx = (self.dx + w // 2) % w - w // 2
        return Shift2D(dy, dx)


def circular_shift(grid: np.ndarray, shift: Shift2D) -> np.ndarray:
    """Apply an integer circular shift over the trailing two axes."""
    grid = np.asarray(grid)
    if grid.ndim < 2:
        raise ValueError(f"circular_shift expects >= 2-D, got shape {grid.shape}")
    return np.roll(grid, (shift.dy, shift.dx), axis=(-2, -1))


def log_sum_exp(values: np.ndarray) -> float:
    """Max-stabilized log(sum(exp(values))) over all entries."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("log_sum_exp of an empty array")
    if not np.all(np.isfinite(values)):
        raise ValueError("log_sum_exp input contains non-finite values")
    m = float(values.max())
    return m + float(np.log(np.sum(np.exp(values - m))))
