"""Unrolled solver network: cascaded 3x3 filter banks feeding the HQS core.

The network has L layers. Layer l consumes pyramid level l of the
observation, where the pyramid is built top-down from 3x3 banks:

    level L:  y^L_i = sum_p w^L[i, p] * y_p          (p over input planes)
    level l:  y^l_i = sum_j w^l[i, j] * y^{l+1}_j    (l = L-1 .. 1)

so level l equals convolution of the input with an effective filter of
support (3 + 2(L - l))^2. The layers then run the half-quadratic updates
of :mod:`hqdeblur.hqs`, and the final kernel/feature maps drive the
spectral reconstruction with the last (3x3) bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from . import dblt
from .hqs import UnrollTrace, reconstruct_color, reconstruct_gray, unroll
from .spectral import SupportMask

__all__ = [
    "NetworkParams",
    "ForwardResult",
    "ForwardTape",
    "effective_filters",
    "filter_pyramid",
    "forward",
    "save_model",
    "load_model",
]


@dataclass
class NetworkParams:
    """Learnable parameters and fixed structure of the unrolled network.

    ``w[0]`` belongs to layer 1 (deepest cascade) and ``w[-1]`` to layer L
    (applied directly to the input planes). All banks are 3x3: layer L is
    (C, planes, 3, 3), the others (C, C, 3, 3).
    """

    w: list[np.ndarray]
    b: np.ndarray         # (L, C) shrinkage thresholds, >= 0
    zeta: np.ndarray      # (L, C) proximal weights, > 0
    beta: np.ndarray      # (L,) kernel threshold scales, >= 0
    eta: np.ndarray       # (C,) reconstruction weights, > 0
    k_shape: tuple[int, int]
    epsilon: float = 1e-6

    @property
    def depth(self) -> int:
        return len(self.w)

    @property
    def channels(self) -> int:
        return self.w[0].shape[0]

    @property
    def planes(self) -> int:
        return self.w[-1].shape[1]

    @property
    def support(self) -> SupportMask:
        return SupportMask.at_origin(*self.k_shape)

    def weight_count(self) -> int:
        return int(sum(wl.size for wl in self.w))

    def parameter_count(self) -> int:
        return self.weight_count() + self.b.size + self.zeta.size + self.beta.size + self.eta.size

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            w=[wl.copy() for wl in self.w],
            b=self.b.copy(), zeta=self.zeta.copy(), beta=self.beta.copy(),
            eta=self.eta.copy(), k_shape=tuple(self.k_shape), epsilon=self.epsilon,
        )

    def validate(self) -> None:
        L = self.depth
        if L < 1:
            raise ValueError("network needs at least one layer")
        C = self.channels
        planes = self.planes
        if planes not in (1, 3):
            raise ValueError(f"input planes must be 1 (gray) or 3 (color), got {planes}")
        for l, wl in enumerate(self.w):
            want = (C, C, 3, 3) if l < L - 1 else (C, planes, 3, 3)
            if wl.shape != want:
                raise ValueError(f"w[{l}] has shape {wl.shape}, expected {want}")
            if not np.all(np.isfinite(wl)):
                raise ValueError(f"w[{l}] contains non-finite values")
        for name, arr, shape in (("b", self.b, (L, C)), ("zeta", self.zeta, (L, C)),
                                 ("beta", self.beta, (L,)), ("eta", self.eta, (C,))):
            if np.shape(arr) != shape:
                raise ValueError(f"{name} has shape {np.shape(arr)}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.zeta <= 0):
            raise ValueError("zeta must be positive")
        if np.any(self.b < 0):
            raise ValueError("b must be non-negative")
        if np.any(self.beta < 0):
            raise ValueError("beta must be non-negative")
        if np.any(self.eta <= 0):
            raise ValueError("eta must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if min(self.k_shape) < 1:
            raise ValueError(f"kernel window must be non-empty, got {self.k_shape}")


def effective_filters(params: NetworkParams) -> list[np.ndarray]:
    """Per-level filters equivalent to the cascade, largest support first.

    Returns L arrays, entry l-1 shaped (C, planes, 3 + 2(L-l), same).
    """
    filters = [np.asarray(params.w[-1], dtype=float)]
    for wl in reversed(params.w[:-1]):
        prev = filters[0]
        C, planes, s, _ = prev.shape
        out = np.zeros((wl.shape[0], planes, s + 2, s + 2))
        for i in range(wl.shape[0]):
            for j in range(wl.shape[1]):
                for p in range(planes):
                    out[i, p] += convolve2d(wl[i, j], prev[j, p], mode="full")
        filters.insert(0, out)
    return filters


def _tap_convolve(maps: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """out[i] = sum_j bank[i, j] (*) maps[j], circular, 3x3 taps via rolls."""
    C_out = bank.shape[0]
    out = np.zeros((C_out,) + maps.shape[-2:])
    for j in range(maps.shape[0]):
        for dy in range(bank.shape[2]):
            for dx in range(bank.shape[3]):
                taps = bank[:, j, dy, dx]
                if np.any(taps != 0.0):
                    rolled = np.roll(maps[j], (dy, dx), axis=(0, 1))
                    out += taps[:, None, None] * rolled
    return out


def _as_planes(y: np.ndarray, params: NetworkParams) -> tuple[np.ndarray, bool]:
    y = np.asarray(y, dtype=float)
    if params.planes == 1:
        if y.ndim != 2:
            raise ValueError(
                f"this model is grayscale (1 input plane); got input shape {y.shape}"
            )
        return y[None], True
    if y.ndim != 3 or y.shape[0] != 3:
        raise ValueError(
            f"this model is color (3 input planes); got input shape {y.shape}"
        )
    return y, False


def filter_pyramid(y: np.ndarray, params: NetworkParams) -> list[np.ndarray]:
    """All pyramid levels y^1 .. y^L, each (C, H, W)."""
    planes, _ = _as_planes(y, params)
    levels = [_tap_convolve(planes, params.w[-1])]
    for wl in reversed(params.w[:-1]):
        levels.insert(0, _tap_convolve(levels[0], wl))
    return levels


@dataclass
class ForwardTape:
    """Everything the backward pass needs to replay a forward run."""

    observation: np.ndarray        # input as (planes, H, W)
    gray_input: bool
    levels: list[np.ndarray]       # pyramid levels y^1 .. y^L
    unroll: UnrollTrace
    image: np.ndarray              # reconstruction, (planes, H, W)


@dataclass
class ForwardResult:
    image: np.ndarray              # latent estimate, caller's convention
    kernel: np.ndarray             # recovered blur kernel (k_shape)
    features: np.ndarray           # final least-squares feature maps (C, H, W)
    tape: ForwardTape


def forward(y: np.ndarray, params: NetworkParams,
            on_degenerate: str = "fallback") -> ForwardResult:
    """Full forward pass: pyramid, L unrolled layers, reconstruction."""
    planes, gray = _as_planes(y, params)
    h, w = planes.shape[-2:]
    reach = 3 + 2 * (params.depth - 1)
    if h < reach or w < reach:
        raise ValueError(
            f"image {h}x{w} is smaller than the cascade support {reach}x{reach}"
        )
    params.support.validate_for((h, w))

    levels = filter_pyramid(y, params)
    trace = unroll(levels, params.zeta, params.b, params.beta,
                   params.support, params.epsilon, on_degenerate)
    kernel = trace.layers[-1].k_out
    # Reconstruction consumes the pre-shrinkage least-squares features:
    # soft-thresholding biases z low by b, g tracks the filtered image.
    feats = trace.layers[-1].g
    if gray:
        image = reconstruct_gray(planes[0], kernel, feats,
                                 params.w[-1][:, 0], params.eta)
        image_planes = image[None]
        out = image
    else:
        image = reconstruct_color(planes, kernel, feats, params.w[-1], params.eta)
        image_planes = image
        out = image
    tape = ForwardTape(observation=planes, gray_input=gray, levels=levels,
                       unroll=trace, image=image_planes)
    return ForwardResult(image=out, kernel=kernel, features=feats, tape=tape)


_META_LEN = 6


def model_entries(params: NetworkParams) -> dict[str, np.ndarray]:
    """Named-tensor manifest entries describing a parameter set."""
    entries: dict[str, np.ndarray] = {
        "meta": np.array([params.depth, params.channels, params.planes,
                          params.k_shape[0], params.k_shape[1], params.epsilon],
                         dtype=float),
    }
    for l, wl in enumerate(params.w, start=1):
        entries[f"w.{l}"] = wl
    for l in range(1, params.depth + 1):
        entries[f"b.{l}"] = params.b[l - 1]
        entries[f"zeta.{l}"] = params.zeta[l - 1]
    entries["beta"] = params.beta
    entries["eta"] = params.eta
    return entries


def params_from_entries(entries: dict[str, np.ndarray]) -> NetworkParams:
    """Rebuild parameters from manifest entries; structural validation included."""
    if "meta" not in entries or entries["meta"].shape != (_META_LEN,):
        raise ValueError("model file lacks a valid meta record")
    L, C, planes, kh, kw, epsilon = entries["meta"]
    L, C = int(L), int(C)
    params = NetworkParams(
        w=[entries[f"w.{l}"] for l in range(1, L + 1)],
        b=np.stack([entries[f"b.{l}"] for l in range(1, L + 1)]),
        zeta=np.stack([entries[f"zeta.{l}"] for l in range(1, L + 1)]),
        beta=entries["beta"],
        eta=entries["eta"],
        k_shape=(int(kh), int(kw)),
        epsilon=float(epsilon),
    )
    if params.channels != C or params.planes != int(planes):
        raise ValueError("model meta record disagrees with tensor shapes")
    params.validate()
    return params


def save_model(path, params: NetworkParams) -> None:
    """Serialize parameters to a named-tensor manifest (atomic write)."""
    dblt.write_manifest(path, model_entries(params))


def load_model(path) -> NetworkParams:
    """Read parameters back from a manifest file."""
    return params_from_entries(dblt.read_manifest(path))
