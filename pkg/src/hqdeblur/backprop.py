"""Analytic gradients for the unrolled network, derived by hand.

Strategy: every forward step is one of

* a spectral map ``x -> idft2(M * dft2(x))`` whose adjoint is the same
  map with the conjugate mask (all masks here are Hermitian-symmetric,
  so adjoints of real fields stay real);
* an elementwise nonlinearity whose activity mask the forward trace
  recorded (soft-threshold live set, kernel-step ReLU set, branch taken);
* a smooth scalar reduction (log-sum-exp, mass normalization) with a
  closed-form Jacobian.

Quotient steps (the g-solve, the kernel ridge solve, the reconstruction)
contribute two spectral terms each, one from the numerator and one from
the denominator. The backward sweep walks layers in reverse, then pushes
the accumulated per-level map gradients down the filter pyramid. The
shift ambiguity of blind deblurring is absorbed by aligning the true
kernel onto the estimate before comparing (the alignment shift is held
constant during differentiation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import ForwardTape, NetworkParams
from .spectral import Shift2D, SupportMask, circular_shift, dft2, embed, idft2, restrict

__all__ = [
    "GradientSet",
    "LossTerms",
    "align_shift",
    "loss_terms",
    "loss_seeds",
    "backward",
    "grad_eta_beta",
]

# relative tolerance for treating correlation scores as tied
_TIE_RTOL = 1e-9


def _fft(a: np.ndarray) -> np.ndarray:
    return np.fft.fft2(a, axes=(-2, -1))


def _ifft_real(A: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(A, axes=(-2, -1)).real


def align_shift(a: np.ndarray, b: np.ndarray) -> Shift2D:
    """Circular shift s maximizing sum(a * shift(b, s)).

    Ties (within relative tolerance 1e-9) resolve to the row-major first
    maximizer in [0,H)x[0,W), so featureless inputs align at (0, 0); the
    result is then reported in the centered range.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"alignment needs matching 2-D grids, got {a.shape} and {b.shape}")
    corr = _ifft_real(dft2(a) * np.conj(dft2(b)))
    peak = corr.max()
    cutoff = peak - _TIE_RTOL * max(1.0, abs(peak))
    dy, dx = np.argwhere(corr >= cutoff)[0]
    return Shift2D(int(dy), int(dx)).canonical_for(a.shape)


@dataclass(frozen=True)
class LossTerms:
    kernel_term: float
    image_term: float
    kappa: float
    tau: Shift2D

    @property
    def total(self) -> float:
        return self.kernel_term + self.image_term


def _embed_kernels(image: np.ndarray, kernel: np.ndarray, k_true: np.ndarray):
    grid = image.shape[-2:]
    return embed(kernel, grid), embed(np.asarray(k_true, dtype=float), grid)


def loss_terms(image: np.ndarray, kernel: np.ndarray, x_true: np.ndarray,
               k_true: np.ndarray, kappa0: float = 1e5,
               tau: Shift2D | None = None) -> LossTerms:
    """Shift-aligned squared error on the kernel and the latent image.

    kappa0/(2 max|k_true|^2) * MSE(k_emb, shift(k_true_emb, tau))
      + 1/2 * MSE(image, shift(x_true, -tau))

    Both kernels are compared on the image grid after zero-embedding;
    ``tau`` aligns the true kernel onto the estimate and defaults to the
    cross-correlation maximizer. MSE means "mean over all entries".
    """
    image = np.asarray(image, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if image.shape != x_true.shape:
        raise ValueError(f"latent shapes differ: {image.shape} vs {x_true.shape}")
    k_emb, kt_emb = _embed_kernels(image, kernel, k_true)
    if tau is None:
        tau = align_shift(k_emb, kt_emb)
    peak = float(np.max(np.abs(k_true)))
    if peak == 0.0:
        raise ValueError("true kernel is identically zero")
    kappa = float(kappa0) / peak**2
    kernel_term = 0.5 * kappa * float(np.mean((k_emb - circular_shift(kt_emb, tau)) ** 2))
    image_term = 0.5 * float(np.mean((image - circular_shift(x_true, tau.negate())) ** 2))
    return LossTerms(kernel_term=kernel_term, image_term=image_term,
                     kappa=kappa, tau=tau)


def loss_seeds(image: np.ndarray, kernel: np.ndarray, x_true: np.ndarray,
               k_true: np.ndarray, kappa0: float = 1e5,
               tau: Shift2D | None = None):
    """Loss value plus its gradients w.r.t. the network outputs.

    Returns (terms, d/d image, d/d kernel); the kernel seed lives on the
    estimate's own (kh, kw) window. The alignment shift is treated as a
    constant of the differentiation.
    """
    image = np.asarray(image, dtype=float)
    terms = loss_terms(image, kernel, x_true, k_true, kappa0, tau)
    k_emb, kt_emb = _embed_kernels(image, kernel, k_true)
    grid = image.shape[-2:]
    seed_image = (image - circular_shift(np.asarray(x_true, dtype=float),
                                         terms.tau.negate())) / image.size
    full = terms.kappa * (k_emb - circular_shift(kt_emb, terms.tau)) / (grid[0] * grid[1])
    seed_kernel = restrict(full, SupportMask.at_origin(*np.shape(kernel)))
    return terms, seed_image, seed_kernel


@dataclass
class GradientSet:
    """Gradients mirroring the layout of NetworkParams."""

    w: list[np.ndarray]
    b: np.ndarray
    zeta: np.ndarray
    beta: np.ndarray
    eta: np.ndarray

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "GradientSet":
        return cls(
            w=[np.zeros_like(wl) for wl in params.w],
            b=np.zeros_like(params.b),
            zeta=np.zeros_like(params.zeta),
            beta=np.zeros_like(params.beta),
            eta=np.zeros_like(params.eta),
        )

    def add_scaled(self, other: "GradientSet", scale: float = 1.0) -> None:
        for mine, theirs in zip(self.w, other.w):
            mine += scale * theirs
        self.b += scale * other.b
        self.zeta += scale * other.zeta
        self.beta += scale * other.beta
        self.eta += scale * other.eta

    def max_abs(self) -> float:
        vals = [np.max(np.abs(wl)) if wl.size else 0.0 for wl in self.w]
        vals += [np.max(np.abs(a)) if a.size else 0.0
                 for a in (self.b, self.zeta, self.beta, self.eta)]
        return float(max(vals))


def _recon_backward(tape: ForwardTape, params: NetworkParams, grads: GradientSet,
                    seed_image: np.ndarray, support: SupportMask):
    """Backward through the spectral reconstruction.

    Returns (gradient w.r.t. final feature maps, gradient w.r.t. final
    kernel window). Uses the per-bin adjoint solve lambda = A^{-1} Gx_hat
    of the same Hermitian normal matrix the forward inverted.
    """
    P = params.planes
    grid = tape.unroll.grid_shape
    hw = grid[0] * grid[1]
    k_final = tape.unroll.layers[-1].k_out
    feats_final = tape.unroll.layers[-1].g   # pre-shrinkage features

    K = dft2(embed(k_final, grid, support))
    Y = _fft(tape.observation)                       # (P, H, W)
    Z = _fft(feats_final)                            # (C, H, W)
    X = _fft(tape.image)                             # (P, H, W)
    Wspec = np.stack([
        np.stack([dft2(embed(params.w[-1][i, c], grid)) for c in range(P)])
        for i in range(params.channels)
    ])                                               # (C, P, H, W)
    Gx_hat = _fft(seed_image)                        # (P, H, W)
    eta = params.eta

    if P == 1:
        D = np.abs(K) ** 2 + np.sum(eta[:, None, None] * np.abs(Wspec[:, 0]) ** 2, axis=0)
        lam = (Gx_hat[0] / D)[None]
    else:
        A = np.einsum("i,ichw,idhw->hwcd", eta, np.conj(Wspec), Wspec)
        A = A + (np.abs(K) ** 2)[..., None, None] * np.eye(P)
        rhs = Gx_hat.transpose(1, 2, 0)[..., None]
        lam = np.linalg.solve(A, rhs)[..., 0].transpose(2, 0, 1)

    W_lam = np.einsum("iphw,phw->ihw", Wspec, lam)       # sum_c W_ic lam_c
    W_x = np.einsum("iphw,phw->ihw", Wspec, X)           # sum_c W_ic x_c
    lam_h_x = np.einsum("phw,phw->hw", np.conj(lam), X)  # lambda^H x per bin

    g_feats = _ifft_real(eta[:, None, None] * W_lam)

    k_spectral = np.einsum("phw,phw->hw", np.conj(lam), Y) - 2.0 * K * lam_h_x.real
    g_kernel = restrict(_ifft_real(k_spectral), support)

    grads.eta += np.einsum("ihw,ihw->i", np.conj(W_lam), Z - W_x).real / hw

    w_spectral = (np.conj(lam)[None] * (Z - W_x)[:, None]
                  - np.conj(X)[None] * W_lam[:, None])          # (C, P, H, W)
    w_full = _ifft_real(eta[:, None, None, None] * w_spectral)
    grads.w[-1] += w_full[:, :, :3, :3]
    return g_feats, g_kernel


def backward(tape: ForwardTape, params: NetworkParams, seed_image: np.ndarray,
             seed_kernel: np.ndarray) -> GradientSet:
    """Gradients of a scalar loss w.r.t. all learnable parameters.

    ``seed_image`` and ``seed_kernel`` are the loss gradients w.r.t. the
    forward outputs (image in the caller's layout, kernel on its own
    window). Replays the recorded trace; never re-decides branches.
    """
    L = params.depth
    grid = tape.unroll.grid_shape
    hw = grid[0] * grid[1]
    support = tape.unroll.support
    eps = tape.unroll.epsilon
    layers = tape.unroll.layers
    if len(layers) != L:
        raise ValueError(f"trace depth {len(layers)} does not match params depth {L}")

    seed_image = np.asarray(seed_image, dtype=float)
    want = grid if params.planes == 1 else (params.planes,) + grid
    if seed_image.shape != want:
        raise ValueError(f"image seed has shape {seed_image.shape}, expected {want}")
    seed_kernel = np.asarray(seed_kernel, dtype=float)
    if seed_kernel.shape != support.shape:
        raise ValueError(
            f"kernel seed has shape {seed_kernel.shape}, expected {support.shape}"
        )

    grads = GradientSet.zeros_like(params)
    seed_planes = seed_image[None] if params.planes == 1 else seed_image

    # The reconstruction consumes g^{L+1} (pre-shrinkage), so its feature
    # gradient seeds the g-slot of the top layer, below; the z-slot starts
    # empty and only collects kernel-step contributions.
    g_feat_seed, g_k_next = _recon_backward(tape, params, grads, seed_planes,
                                            support)
    g_k_next = g_k_next + seed_kernel
    g_z_next = np.zeros_like(layers[-1].z)
    g_levels = [np.zeros_like(lvl) for lvl in tape.levels]

    for l in range(L - 1, -1, -1):
        layer = layers[l]
        kst = layer.kstep
        Y = _fft(layer.y_maps)
        Z_new = _fft(layer.z)

        # kernel-step backward: seed g_k_next (w.r.t. k^{l+1})
        if kst.branch != "delta":
            inner = float(np.sum(g_k_next * layer.k_out))
            g_t = (g_k_next - inner) / kst.mass
            r = np.where(kst.active, g_t, 0.0)
            if kst.branch == "threshold":
                r_sum = float(r.sum())
                grads.beta[l] += -kst.lse * r_sum
                softmax = np.exp(kst.windowed - kst.lse)
                g_v = r - params.beta[l] * r_sum * softmax
            else:
                g_v = r
            Gu_hat = dft2(embed(g_v, grid))
            Dk = np.sum(np.abs(Z_new) ** 2, axis=0) + eps
            u_hat = dft2(kst.solve_full)
            g_levels[l] += _ifft_real(Z_new * Gu_hat / Dk)
            g_z_next += _ifft_real(
                ((Y - u_hat * Z_new) * np.conj(Gu_hat) - np.conj(u_hat) * Z_new * Gu_hat) / Dk
            )
        # "delta" branch emits a constant kernel: nothing flows back

        # shrinkage backward: z^{l+1} = S_b(g^{l+1})
        bvec = params.b[l][:, None, None]
        live = np.abs(layer.g) > bvec
        g_g = np.where(live, g_z_next, 0.0)
        grads.b[l] += -np.sum(np.where(live, np.sign(layer.g) * g_z_next, 0.0),
                              axis=(-2, -1))
        if l == L - 1:
            g_g = g_g + g_feat_seed   # reconstruction path enters at g^{L+1}

        # quadratic-step backward: feeds z^l, y^l, k^l, zeta^l
        K_in = dft2(embed(layer.k_in, grid, support))
        zl = params.zeta[l][:, None, None]
        Dg = zl * np.abs(K_in) ** 2 + 1.0
        Gg_hat = _fft(g_g)
        g_hat = _fft(layer.g)
        g_levels[l] += _ifft_real(zl * K_in * Gg_hat / Dg)
        grads.zeta[l] += np.sum(
            (np.conj(K_in) * (Y - K_in * g_hat) * np.conj(Gg_hat) / Dg).real,
            axis=(-2, -1)) / hw
        k_spectral = np.sum(
            zl * (np.conj(Gg_hat) * (Y - g_hat * K_in) - Gg_hat * np.conj(g_hat) * K_in) / Dg,
            axis=0)
        g_k_next = restrict(_ifft_real(k_spectral), support)
        g_z_next = _ifft_real(Gg_hat / Dg)
    # g_z_next / g_k_next now address the constant initial state; discarded

    # pyramid backward: push level gradients down, collect tap gradients
    for m in range(L):
        src = tape.levels[m + 1] if m < L - 1 else tape.observation
        bank = params.w[m]
        glev = g_levels[m]
        for j in range(bank.shape[1]):
            for dy in range(3):
                for dx in range(3):
                    rolled = np.roll(src[j], (dy, dx), axis=(0, 1))
                    grads.w[m][:, j, dy, dx] += np.einsum("chw,hw->c", glev, rolled)
        if m < L - 1:
            nxt = g_levels[m + 1]
            for j in range(bank.shape[1]):
                acc = np.zeros(grid)
                for dy in range(3):
                    for dx in range(3):
                        taps = bank[:, j, dy, dx]
                        if np.any(taps != 0.0):
                            acc += np.einsum("c,chw->hw", taps,
                                             np.roll(glev, (-dy, -dx), axis=(-2, -1)))
                nxt[j] += acc
    return grads


def grad_eta_beta(tape: ForwardTape, params: NetworkParams, seed_image: np.ndarray,
                  seed_kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the reconstruction weights and kernel thresholds only."""
    grads = backward(tape, params, seed_image, seed_kernel)
    return grads.eta.copy(), grads.beta.copy()
