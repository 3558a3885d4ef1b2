"""Half-quadratic splitting core for blind deblurring in filtered domains.

The solver works on a bank of filtered copies of the blurred observation
and alternates three closed-form updates:

* ``g_update`` - per-map quadratic solve balancing data fit against a
  proximal pull toward the current sparse split;
* ``soft_threshold`` - elementwise shrinkage producing the sparse split;
* ``k_update`` - ridge-regularized spectral solve for the blur kernel,
  followed by windowing to the kernel support, a log-sum-exp-scaled
  threshold, and l1 normalization onto the simplex.

Every update has an exact algebraic characterization (normal equations or
a separable minimizer), which the test suite checks independently. The
unrolled variants record a trace of all intermediates so the analytic
backward pass can replay decisions (threshold activity, kernel-step
branch) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .spectral import SupportMask, dft2, embed, idft2, log_sum_exp, restrict

__all__ = [
    "DegenerateKernelError",
    "IllPosedReconstructionError",
    "HqsHyper",
    "KernelStepTrace",
    "LayerTrace",
    "UnrollTrace",
    "HqsResult",
    "soft_threshold",
    "g_update",
    "k_update",
    "k_update_traced",
    "unroll",
    "run_hqs",
    "penalty_value",
    "reconstruct_gray",
    "reconstruct_color",
]

# below this mass the thresholded kernel is treated as degenerate
_MASS_FLOOR = 1e-12


class DegenerateKernelError(RuntimeError):
    """Kernel update produced no usable mass inside the support window."""


class IllPosedReconstructionError(RuntimeError):
    """Reconstruction normal equations are numerically singular."""


def _fft(a: np.ndarray) -> np.ndarray:
    return np.fft.fft2(a, axes=(-2, -1))


def _ifft_real(A: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(A, axes=(-2, -1)).real


def delta_kernel(shape: tuple[int, int]) -> np.ndarray:
    """Unit impulse at the window center.

    Blur kernels live centered in their support window, so the identity
    element of that family carries its mass at the center cell. Anchoring
    the impulse there keeps estimates centered too: the first kernel step
    cross-correlates features deconvolved in the centered frame, so a
    centered ground truth is representable without clipping at the window
    edge.
    """
    k = np.zeros(shape)
    k[shape[0] // 2, shape[1] // 2] = 1.0
    return k


def soft_threshold(x: np.ndarray, b) -> np.ndarray:
    """S_b(x) = sign(x) * max(|x| - b, 0), elementwise; b >= 0."""
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise ValueError("soft_threshold requires a non-negative threshold")
    return np.sign(x) * np.maximum(np.abs(x) - b, 0.0)


def g_update(y_i: np.ndarray, kernel: np.ndarray, z_i: np.ndarray, zeta_i: float) -> np.ndarray:
    """Closed-form minimizer of 1/2||y_i - k*g||^2 + 1/(2 zeta_i)||g - z_i||^2.

    Solved per frequency bin: g_hat = (zeta conj(k_hat) y_hat + z_hat)
    / (zeta |k_hat|^2 + 1). The denominator is >= 1, so the solve is
    unconditionally well posed.
    """
    if zeta_i <= 0:
        raise ValueError(f"zeta must be positive, got {zeta_i}")
    y_i = np.asarray(y_i, dtype=float)
    z_i = np.asarray(z_i, dtype=float)
    if y_i.shape != z_i.shape or y_i.ndim != 2:
        raise ValueError(f"y and z must be matching 2-D grids, got {y_i.shape} and {z_i.shape}")
    K = dft2(embed(kernel, y_i.shape))
    num = zeta_i * np.conj(K) * dft2(y_i) + dft2(z_i)
    return idft2(num / (zeta_i * np.abs(K) ** 2 + 1.0))


@dataclass
class KernelStepTrace:
    """Intermediates of one kernel update, kept for the backward pass."""

    solve_full: np.ndarray   # full-grid ridge solve u
    windowed: np.ndarray     # u restricted to the support window (v)
    lse: float               # log-sum-exp of v over the window
    thresholded: np.ndarray  # t = relu(v - beta * lse) (or the fallback)
    mass: float              # normalizing sum used for the division
    active: np.ndarray       # strict-positivity mask of the branch taken
    branch: str              # "threshold" | "relu" | "delta"


def _k_update_spectra(Z: np.ndarray, Y: np.ndarray, support: SupportMask,
                      beta: float, epsilon: float,
                      on_degenerate: str) -> tuple[np.ndarray, KernelStepTrace]:
    """Kernel update from precomputed map spectra (C, H, W)."""
    num = np.sum(np.conj(Z) * Y, axis=0)
    den = np.sum(np.abs(Z) ** 2, axis=0) + epsilon
    u = idft2(num / den)
    v = restrict(u, support)
    s = log_sum_exp(v)
    shifted = v - beta * s
    t = np.maximum(shifted, 0.0)
    sigma = float(t.sum())
    if sigma > _MASS_FLOOR:
        k = t / sigma
        trace = KernelStepTrace(u, v, s, t, sigma, shifted > 0, "threshold")
        return k, trace
    if on_degenerate == "raise":
        raise DegenerateKernelError(
            f"thresholding left no kernel mass (sum {sigma:.3e}) in the support window"
        )
    t2 = np.maximum(v, 0.0)
    sigma2 = float(t2.sum())
    if sigma2 > _MASS_FLOOR:
        k = t2 / sigma2
        trace = KernelStepTrace(u, v, s, t2, sigma2, v > 0, "relu")
        return k, trace
    k = delta_kernel(support.shape)
    trace = KernelStepTrace(u, v, s, k.copy(), 1.0, np.zeros(support.shape, dtype=bool), "delta")
    return k, trace


def k_update(z_maps: np.ndarray, y_maps: np.ndarray, support: SupportMask | tuple[int, int],
             beta: float, epsilon: float = 1e-6,
             on_degenerate: str = "fallback") -> np.ndarray:
    """Kernel update: ridge solve, support window, scaled threshold, normalize.

    ``z_maps`` and ``y_maps`` are matching (C, H, W) stacks. The spectral
    solve minimizes sum_i 1/2||y_i - k*z_i||^2 + epsilon/2||k||^2 over
    full-grid kernels; the result is windowed, thresholded at beta times
    the window's log-sum-exp, and normalized to unit mass. A fully
    zeroed-out window falls back to relu(v)/sum, then to the delta
    kernel (or raises, with ``on_degenerate="raise"``).
    """
    if on_degenerate not in ("fallback", "raise"):
        raise ValueError(f"unknown degeneracy policy {on_degenerate!r}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    z_maps = np.asarray(z_maps, dtype=float)
    y_maps = np.asarray(y_maps, dtype=float)
    if z_maps.shape != y_maps.shape or z_maps.ndim != 3:
        raise ValueError(
            f"z and y must be matching (C, H, W) stacks, got {z_maps.shape} and {y_maps.shape}"
        )
    if not isinstance(support, SupportMask):
        support = SupportMask.at_origin(*support)
    support.validate_for(z_maps.shape[-2:])
    kernel, _ = _k_update_spectra(_fft(z_maps), _fft(y_maps), support,
                                  float(beta), float(epsilon), on_degenerate)
    return kernel


def k_update_traced(z_maps: np.ndarray, y_maps: np.ndarray,
                    support: SupportMask | tuple[int, int], beta: float,
                    epsilon: float = 1e-6,
                    on_degenerate: str = "fallback") -> tuple[np.ndarray, KernelStepTrace]:
    """Like k_update but also returns the step's intermediates."""
    z_maps = np.asarray(z_maps, dtype=float)
    y_maps = np.asarray(y_maps, dtype=float)
    if z_maps.shape != y_maps.shape or z_maps.ndim != 3:
        raise ValueError(
            f"z and y must be matching (C, H, W) stacks, got {z_maps.shape} and {y_maps.shape}"
        )
    if not isinstance(support, SupportMask):
        support = SupportMask.at_origin(*support)
    support.validate_for(z_maps.shape[-2:])
    return _k_update_spectra(_fft(z_maps), _fft(y_maps), support,
                             float(beta), float(epsilon), on_degenerate)


@dataclass
class LayerTrace:
    """Everything one unrolled iteration produced, for replay and backward."""

    y_maps: np.ndarray       # filtered observation maps consumed by this layer
    g: np.ndarray            # quadratic-step output g^{l+1}
    z: np.ndarray            # sparse split z^{l+1}
    k_in: np.ndarray         # kernel entering the layer
    k_out: np.ndarray        # kernel leaving the layer
    kstep: KernelStepTrace


@dataclass
class UnrollTrace:
    layers: list[LayerTrace]
    support: SupportMask
    epsilon: float
    grid_shape: tuple[int, int]

    @property
    def depth(self) -> int:
        return len(self.layers)


def unroll(y_levels: Sequence[np.ndarray], zeta: np.ndarray, b: np.ndarray,
           beta: np.ndarray, support: SupportMask, epsilon: float,
           on_degenerate: str = "fallback") -> UnrollTrace:
    """Run L coupled iterations, layer l consuming filtered maps y_levels[l].

    State initialization: the kernel starts as the delta (identity)
    kernel and the sparse split starts at zero. Returns the full trace;
    the final kernel and feature maps are the last layer's outputs.
    """
    L = len(y_levels)
    zeta = np.asarray(zeta, dtype=float)
    b = np.asarray(b, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if L == 0:
        raise ValueError("need at least one layer")
    shape = y_levels[0].shape
    if len(shape) != 3:
        raise ValueError(f"y_levels entries must be (C, H, W), got {shape}")
    C = shape[0]
    if zeta.shape != (L, C) or b.shape != (L, C) or beta.shape != (L,):
        raise ValueError(
            f"hyperparameter shapes must be zeta {(L, C)}, b {(L, C)}, beta {(L,)}; "
            f"got {zeta.shape}, {b.shape}, {beta.shape}"
        )
    if np.any(zeta <= 0):
        raise ValueError("zeta must be positive")
    if np.any(b < 0):
        raise ValueError("thresholds b must be non-negative")
    support.validate_for(shape[-2:])

    k_small = delta_kernel(support.shape)
    Z_hat = np.zeros(shape, dtype=complex)
    layers: list[LayerTrace] = []
    for l in range(L):
        y_maps = np.asarray(y_levels[l], dtype=float)
        if y_maps.shape != shape:
            raise ValueError(f"layer {l + 1} maps have shape {y_maps.shape}, expected {shape}")
        Y = _fft(y_maps)
        K = dft2(embed(k_small, shape[-2:]))
        zl = zeta[l][:, None, None]
        G_hat = (zl * np.conj(K) * Y + Z_hat) / (zl * np.abs(K) ** 2 + 1.0)
        g = _ifft_real(G_hat)
        z = soft_threshold(g, b[l][:, None, None])
        Z_hat = _fft(z)
        k_next, kstep = _k_update_spectra(Z_hat, Y, support, float(beta[l]),
                                          float(epsilon), on_degenerate)
        layers.append(LayerTrace(y_maps=y_maps, g=g, z=z, k_in=k_small,
                                 k_out=k_next, kstep=kstep))
        k_small = k_next
    return UnrollTrace(layers=layers, support=support, epsilon=float(epsilon),
                       grid_shape=shape[-2:])


@dataclass(frozen=True)
class HqsHyper:
    """Per-iteration hyperparameters of the fixed-filter solver."""

    zeta: np.ndarray   # (C,) positive proximal weights
    b: np.ndarray      # (C,) non-negative shrinkage thresholds
    beta: float        # kernel threshold scale
    epsilon: float = 1e-6


@dataclass
class HqsResult:
    kernel: np.ndarray
    features: np.ndarray
    trace: UnrollTrace


def run_hqs(y: np.ndarray, filters: np.ndarray, hyper: HqsHyper | Sequence[HqsHyper],
            iterations: int, k_shape: tuple[int, int],
            on_degenerate: str = "fallback") -> HqsResult:
    """Classic fixed-filter solver: the same filter bank at every iteration.

    ``filters`` is a (C, fh, fw) bank applied once to ``y``; the resulting
    maps feed all ``iterations`` layers. ``hyper`` is either a single
    HqsHyper reused throughout or one per iteration (continuation).
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError(f"run_hqs expects a grayscale (H, W) observation, got {y.shape}")
    filters = np.asarray(filters, dtype=float)
    if filters.ndim != 3:
        raise ValueError(f"filters must be (C, fh, fw), got {filters.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    hypers = list(hyper) if isinstance(hyper, (list, tuple)) else [hyper] * iterations
    if len(hypers) != iterations:
        raise ValueError(f"got {len(hypers)} hyper sets for {iterations} iterations")

    C = filters.shape[0]
    Y = dft2(y)
    maps = _ifft_real(np.stack([dft2(embed(f, y.shape)) for f in filters]) * Y)
    zeta = np.stack([np.broadcast_to(np.asarray(h.zeta, dtype=float), (C,)) for h in hypers])
    b = np.stack([np.broadcast_to(np.asarray(h.b, dtype=float), (C,)) for h in hypers])
    beta = np.array([h.beta for h in hypers], dtype=float)
    eps = hypers[0].epsilon
    if any(h.epsilon != eps for h in hypers):
        raise ValueError("epsilon must be shared across iterations")
    trace = unroll([maps] * iterations, zeta, b, beta,
                   SupportMask.at_origin(*k_shape), eps, on_degenerate)
    last = trace.layers[-1]
    # The feature estimate handed to reconstruction is the least-squares
    # g, not the shrunken z: shrinkage biases magnitudes low by exactly b,
    # while g approximates the filtered sharp image.
    return HqsResult(kernel=last.k_out, features=last.g, trace=trace)


def penalty_value(y_maps: np.ndarray, kernel: np.ndarray, g: np.ndarray,
                  z: np.ndarray, zeta: np.ndarray, b: np.ndarray,
                  epsilon: float) -> float:
    """Value of the splitting objective at (g, z) for a fixed kernel.

    sum_i [ 1/2||y_i - k*g_i||^2 + (b_i/zeta_i)||z_i||_1
            + 1/(2 zeta_i)||g_i - z_i||^2 ] + epsilon/2 ||k||^2

    The g and z updates are exact minimizers of this objective in their
    blocks, so its value must never increase across either update.
    """
    y_maps = np.asarray(y_maps, dtype=float)
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    K = dft2(embed(kernel, y_maps.shape[-2:]))
    blur_g = _ifft_real(K * _fft(g))
    data = 0.5 * np.sum((y_maps - blur_g) ** 2)
    l1 = float(np.sum((b / zeta) * np.sum(np.abs(z), axis=(-2, -1))))
    prox = float(np.sum(np.sum((g - z) ** 2, axis=(-2, -1)) / (2.0 * zeta)))
    ridge = 0.5 * epsilon * float(np.sum(kernel ** 2))
    return float(data) + l1 + prox + ridge


def _embedded_filter_spectra(filters: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    return np.stack([dft2(embed(f, grid_shape)) for f in filters])


def reconstruct_gray(y: np.ndarray, kernel: np.ndarray, features: np.ndarray,
                     filters: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Non-blind spectral reconstruction of a grayscale latent image.

    Minimizes 1/2||y - k*x||^2 + sum_i eta_i/2 ||f_i*x - z_i||^2, solved
    per frequency bin. Raises IllPosedReconstructionError when the
    denominator collapses at some bin.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError(f"expected a grayscale (H, W) observation, got {y.shape}")
    features = np.asarray(features, dtype=float)
    filters = np.asarray(filters, dtype=float)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if features.ndim != 3 or filters.ndim != 3 or len(eta) != len(filters):
        raise ValueError("features (C,H,W), filters (C,fh,fw) and eta (C,) must align")
    if np.any(eta < 0):
        raise ValueError("eta must be non-negative")
    K = dft2(embed(kernel, y.shape))
    F = _embedded_filter_spectra(filters, y.shape)
    Z = _fft(features)
    denom = np.abs(K) ** 2 + np.sum(eta[:, None, None] * np.abs(F) ** 2, axis=0)
    if denom.min() <= 1e-15 * max(denom.max(), 1.0):
        raise IllPosedReconstructionError(
            f"reconstruction denominator collapses (min {denom.min():.3e})"
        )
    num = np.conj(K) * dft2(y) + np.sum(eta[:, None, None] * np.conj(F) * Z, axis=0)
    return idft2(num / denom)


def reconstruct_color(y: np.ndarray, kernel: np.ndarray, features: np.ndarray,
                      filters: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Non-blind reconstruction of an RGB latent image.

    The per-bin normal matrix couples the three channels through the
    last-layer filter bank (filters: (C, 3, fh, fw)); it is Hermitian
    3x3 and solved in closed form via its cofactors.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 3 or y.shape[0] != 3:
        raise ValueError(f"expected an RGB (3, H, W) observation, got {y.shape}")
    features = np.asarray(features, dtype=float)
    filters = np.asarray(filters, dtype=float)
    eta = np.asarray(eta, dtype=float).reshape(-1)
    if filters.ndim != 4 or filters.shape[1] != 3 or len(eta) != len(filters):
        raise ValueError("filters must be (C, 3, fh, fw) with matching eta (C,)")
    if np.any(eta < 0):
        raise ValueError("eta must be non-negative")
    grid = y.shape[-2:]
    K = dft2(embed(kernel, grid))
    K2 = np.abs(K) ** 2
    Y = _fft(y)
    Z = _fft(features)
    # W[i, c] = spectrum of filter i applied to channel c
    W = np.stack([_embedded_filter_spectra(fb, grid) for fb in filters])
    e = eta[:, None, None]

    def cross(c1: int, c2: int) -> np.ndarray:
        return np.sum(e * np.conj(W[:, c1]) * W[:, c2], axis=0)

    c_rr = cross(0, 0).real + K2
    c_gg = cross(1, 1).real + K2
    c_bb = cross(2, 2).real + K2
    c_rg = cross(0, 1)
    c_rb = cross(0, 2)
    c_gb = cross(1, 2)

    b_vec = [np.conj(K) * Y[c] + np.sum(e * np.conj(W[:, c]) * Z, axis=0) for c in range(3)]

    m_rr = c_gg * c_bb - np.abs(c_gb) ** 2
    m_rg = c_rb * np.conj(c_gb) - c_bb * c_rg
    m_rb = c_rg * c_gb - c_gg * c_rb
    m_gg = c_bb * c_rr - np.abs(c_rb) ** 2
    m_gb = np.conj(c_rg) * c_rb - c_rr * c_gb
    m_bb = c_rr * c_gg - np.abs(c_rg) ** 2
    d = ((c_gg * c_rr - np.abs(c_rg) ** 2) * c_bb
         + 2.0 * (np.conj(c_rb) * c_rg * c_gb).real
         - np.abs(c_gb) ** 2 * c_rr - np.abs(c_rb) ** 2 * c_gg)

    scale = ((c_rr + c_gg + c_bb) / 3.0) ** 3
    if not np.all(np.isfinite(d)) or np.any(np.abs(d) <= 1e-12 * scale):
        raise IllPosedReconstructionError("color normal matrix is numerically singular")

    def apply_inverse(r0, r1, r2):
        return ((m_rr * r0 + m_rg * r1 + m_rb * r2) / d,
                (np.conj(m_rg) * r0 + m_gg * r1 + m_gb * r2) / d,
                (np.conj(m_rb) * r0 + np.conj(m_gb) * r1 + m_bb * r2) / d)

    def apply_matrix(s0, s1, s2):
        return (c_rr * s0 + c_rg * s1 + c_rb * s2,
                np.conj(c_rg) * s0 + c_gg * s1 + c_gb * s2,
                np.conj(c_rb) * s0 + np.conj(c_gb) * s1 + c_bb * s2)

    x_hat = apply_inverse(*b_vec)
    # One step of iterative refinement: the cofactor division loses digits
    # when the 3x3 system is poorly scaled, and polishing with the residual
    # restores them without leaving the closed form.
    a_x = apply_matrix(*x_hat)
    correction = apply_inverse(*(b_vec[c] - a_x[c] for c in range(3)))
    return _ifft_real(np.stack([x_hat[c] + correction[c] for c in range(3)]))
