from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 100.0


def psnr(x, ref) -> float:
    """Peak signal-to-noise ratio in dB for signals on a [0, 1] scale, capped at 100."""
    x = np.asarray(x, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if x.shape != ref.shape:
        raise ValueError(f"length mismatch: {x.size} vs {ref.size}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def default_shape(n: int):
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def ssim(x, ref, shape=None, window: int = 8, K1: float = 0.01, K2: float = 0.03, L: float = 1.0) -> float:
    """Mean SSIM over non-overlapping ``window x window`` tiles.

    Tiles are shrunk to the image size when the image is smaller than the
    window, and trailing rows/columns that do not fill a tile are ignored.
    Statistics use population (1/N) moments with uniform weights.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if x.shape != ref.shape:
        raise ValueError(f"length mismatch: {x.size} vs {ref.size}")
    H, W = default_shape(x.size) if shape is None else shape
    if H * W != x.size:
        raise ValueError(f"cannot view {x.size} values as a {H}x{W} image")
    wh, ww = min(window, H), min(window, W)
    bh, bw = H // wh, W // ww

    def tiles(v):
        v = v.reshape(H, W)[: bh * wh, : bw * ww]
        return v.reshape(bh, wh, bw, ww).transpose(0, 2, 1, 3).reshape(bh * bw, wh * ww)

    a, b = tiles(x), tiles(ref)
    mu_a, mu_b = a.mean(axis=1), b.mean(axis=1)
    da, db = a - mu_a[:, None], b - mu_b[:, None]
    var_a, var_b = (da * da).mean(axis=1), (db * db).mean(axis=1)
    cov = (da * db).mean(axis=1)
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))
