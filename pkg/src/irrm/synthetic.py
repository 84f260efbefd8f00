"""Deterministic synthetic RGB images for smoke tests and toy training."""
import numpy as np


def toy_image(rng, size=64):
    """Smooth colour gradients, a few hard-edged shapes and an oriented texture."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, ph = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi)
        img[c] = 0.5 + 0.25 * np.sin(2 * np.pi * (a * xx + b * yy) + ph)
    for _ in range(rng.integers(2, 5)):
        cy, cx, r = rng.uniform(0.1, 0.9, 2).tolist() + [rng.uniform(0.08, 0.25)]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = rng.uniform(0, 1, (3, 1))
    y0, x0 = rng.integers(0, size // 2, 2)
    h, w = rng.integers(size // 8, size // 2, 2)
    img[:, y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, (3, 1, 1))
    freq, theta = rng.uniform(6, 14), rng.uniform(0, np.pi)
    stripes = 0.08 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    img += stripes
    return np.clip(np.rint(img * 255) / 255, 0, 1)


def toy_images(n=4, size=64, seed=0):
    """List of ``n`` float64 (3, size, size) images on the 8-bit grid."""
    rng = np.random.default_rng(seed)
    return [toy_image(rng, size) for _ in range(n)]
