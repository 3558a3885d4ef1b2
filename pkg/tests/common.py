"""Shared fixtures: compact random-but-valid network parameter sets."""

import numpy as np

from hqdeblur.network import NetworkParams


def make_params(rng, L=2, C=2, planes=1, k_shape=(5, 5), scale=0.25):
    """Random parameters in a regime that keeps every branch well exercised:
    positive thresholds, moderate proximal weights, small positive beta."""
    w = []
    for l in range(L):
        cin = C if l < L - 1 else planes
        w.append(rng.normal(scale=scale, size=(C, cin, 3, 3)))
    return NetworkParams(
        w=w,
        b=rng.uniform(0.005, 0.05, size=(L, C)),
        zeta=rng.uniform(0.5, 2.0, size=(L, C)),
        beta=rng.uniform(0.0005, 0.002, size=L),
        eta=rng.uniform(5.0, 30.0, size=C),
        k_shape=k_shape,
    )


def blurred_scene(rng, shape=(32, 32), k_extent=5, k_shape=(5, 5), noise=0.01):
    """Synthetic (y, x, k) triple: random sharp content, simplex kernel."""
    x = rng.random(shape)
    k = np.zeros(k_shape)
    patch = rng.random((k_extent, k_extent))
    k[:k_extent, :k_extent] = patch / patch.sum()
    K = np.fft.fft2(np.pad(k, ((0, shape[0] - k_shape[0]), (0, shape[1] - k_shape[1]))))
    y = np.fft.ifft2(K * np.fft.fft2(x)).real
    if noise:
        y = y + rng.normal(scale=noise, size=shape)
    return y, x, k
